#include "susan/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <cstring>
#include <functional>
#include <set>
#include <sstream>

#include "susan/rng.hpp"
#include "susan/serialize.hpp"

namespace susan {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const std::string t = trim(s);
  auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size() || !std::isfinite(v)) {
    throw ConfigError(key + ": '" + s + "' is not a finite number");
  }
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const std::string t = trim(s);
  auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size()) {
    throw ConfigError(key + ": '" + s + "' is not a non-negative integer");
  }
  return v;
}

std::size_t to_size(const std::string& key, const std::string& s) {
  return static_cast<std::size_t>(to_u64(key, s));
}

template <typename F>
auto wrap(const std::string& key, F f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};
using Section = std::vector<std::pair<std::string, Field>>;

// Canonical order of every accepted key.
const std::vector<std::pair<std::string, Section>>& schema() {
  static const std::vector<std::pair<std::string, Section>> s = [] {
    std::vector<std::pair<std::string, Section>> out;
    out.push_back({"experiment",
                   {
                       {"seed", {[](const auto& c) { return std::to_string(c.seed); },
                                 [](auto& c, const auto& v) { c.seed = to_u64("seed", v); }}},
                       {"output", {[](const auto& c) { return c.output.generic_string(); },
                                   [](auto& c, const auto& v) {
                                     if (trim(v).empty()) throw ConfigError("output: empty path");
                                     c.output = trim(v);
                                   }}},
                       {"target_domain",
                        {[](const auto& c) { return to_string(c.target_domain); },
                         [](auto& c, const auto& v) {
                           c.target_domain = wrap("target_domain", [&] { return parse_domain(trim(v)); });
                         }}},
                       {"methods",
                        {[](const auto& c) {
                           std::string s;
                           for (auto m : c.methods) s += (s.empty() ? "" : ", ") + to_string(m);
                           return s;
                         },
                         [](auto& c, const auto& v) {
                           c.methods.clear();
                           for (const auto& m : split_list(v)) {
                             c.methods.push_back(wrap("methods", [&] { return parse_train_mode(m); }));
                           }
                         }}},
                       {"sweep_lambda_seg",
                        {[](const auto& c) {
                           std::string s;
                           for (double x : c.sweep_lambda_seg) s += (s.empty() ? "" : ", ") + num(x);
                           return s;
                         },
                         [](auto& c, const auto& v) {
                           c.sweep_lambda_seg.clear();
                           for (const auto& x : split_list(v)) c.sweep_lambda_seg.push_back(to_double("sweep_lambda_seg", x));
                         }}},
                   }});
    out.push_back({"data",
                   {
                       {"image_size", {[](const auto& c) { return std::to_string(c.image_size); },
                                       [](auto& c, const auto& v) { c.image_size = to_size("image_size", v); }}},
                       {"raw_size", {[](const auto& c) { return std::to_string(c.raw_size); },
                                     [](auto& c, const auto& v) { c.raw_size = to_size("raw_size", v); }}},
                       {"slices_per_subject",
                        {[](const auto& c) { return std::to_string(c.slices_per_subject); },
                         [](auto& c, const auto& v) { c.slices_per_subject = to_size("slices_per_subject", v); }}},
                       {"spacing_mm", {[](const auto& c) { return num(c.spacing_mm); },
                                       [](auto& c, const auto& v) { c.spacing_mm = to_double("spacing_mm", v); }}},
                       {"reference_subjects",
                        {[](const auto& c) { return std::to_string(c.reference_subjects); },
                         [](auto& c, const auto& v) { c.reference_subjects = to_size("reference_subjects", v); }}},
                       {"target_subjects",
                        {[](const auto& c) { return std::to_string(c.target_subjects); },
                         [](auto& c, const auto& v) { c.target_subjects = to_size("target_subjects", v); }}},
                   }});
    out.push_back({"generator",
                   {
                       {"depth", {[](const auto& c) { return std::to_string(c.train.generator.depth); },
                                  [](auto& c, const auto& v) { c.train.generator.depth = to_size("generator.depth", v); }}},
                       {"base_channels",
                        {[](const auto& c) { return std::to_string(c.train.generator.base_channels); },
                         [](auto& c, const auto& v) {
                           c.train.generator.base_channels = to_size("generator.base_channels", v);
                         }}},
                       {"leaky_alpha", {[](const auto& c) { return num(c.train.generator.leaky_alpha); },
                                        [](auto& c, const auto& v) {
                                          c.train.generator.leaky_alpha = to_double("generator.leaky_alpha", v);
                                        }}},
                   }});
    out.push_back({"discriminator",
                   {
                       {"depth", {[](const auto& c) { return std::to_string(c.train.discriminator.depth); },
                                  [](auto& c, const auto& v) {
                                    c.train.discriminator.depth = to_size("discriminator.depth", v);
                                  }}},
                       {"base_channels",
                        {[](const auto& c) { return std::to_string(c.train.discriminator.base_channels); },
                         [](auto& c, const auto& v) {
                           c.train.discriminator.base_channels = to_size("discriminator.base_channels", v);
                         }}},
                       {"leaky_alpha", {[](const auto& c) { return num(c.train.discriminator.leaky_alpha); },
                                        [](auto& c, const auto& v) {
                                          c.train.discriminator.leaky_alpha = to_double("discriminator.leaky_alpha", v);
                                        }}},
                   }});
    out.push_back(
        {"train",
         {
             {"learning_rate", {[](const auto& c) { return num(c.train.adam.learning_rate); },
                                [](auto& c, const auto& v) { c.train.adam.learning_rate = to_double("learning_rate", v); }}},
             {"beta1", {[](const auto& c) { return num(c.train.adam.beta1); },
                        [](auto& c, const auto& v) { c.train.adam.beta1 = to_double("beta1", v); }}},
             {"beta2", {[](const auto& c) { return num(c.train.adam.beta2); },
                        [](auto& c, const auto& v) { c.train.adam.beta2 = to_double("beta2", v); }}},
             {"adam_eps", {[](const auto& c) { return num(c.train.adam.eps); },
                           [](auto& c, const auto& v) { c.train.adam.eps = to_double("adam_eps", v); }}},
             {"batch_size", {[](const auto& c) { return std::to_string(c.train.batch_size); },
                             [](auto& c, const auto& v) { c.train.batch_size = to_size("batch_size", v); }}},
             {"epochs", {[](const auto& c) { return std::to_string(c.train.epochs); },
                         [](auto& c, const auto& v) { c.train.epochs = to_size("epochs", v); }}},
             {"lambda_cycle", {[](const auto& c) { return num(c.train.weights.cycle); },
                               [](auto& c, const auto& v) { c.train.weights.cycle = to_double("lambda_cycle", v); }}},
             {"lambda_gan", {[](const auto& c) { return num(c.train.weights.gan); },
                             [](auto& c, const auto& v) { c.train.weights.gan = to_double("lambda_gan", v); }}},
             {"lambda_seg", {[](const auto& c) { return num(c.train.weights.seg); },
                             [](auto& c, const auto& v) { c.train.weights.seg = to_double("lambda_seg", v); }}},
             {"gan_loss", {[](const auto& c) { return to_string(c.train.gan); },
                           [](auto& c, const auto& v) {
                             c.train.gan = wrap("gan_loss", [&] { return parse_gan_loss(trim(v)); });
                           }}},
             {"validate_every_epochs",
              {[](const auto& c) { return std::to_string(c.train.validate_every_epochs); },
               [](auto& c, const auto& v) { c.train.validate_every_epochs = to_size("validate_every_epochs", v); }}},
             {"selection", {[](const auto& c) { return to_string(c.train.selection); },
                            [](auto& c, const auto& v) {
                              c.train.selection = wrap("selection", [&] { return parse_selection_loss(trim(v)); });
                            }}},
             {"divergence_factor",
              {[](const auto& c) { return num(c.train.divergence_factor); },
               [](auto& c, const auto& v) { c.train.divergence_factor = to_double("divergence_factor", v); }}},
             {"divergence_patience",
              {[](const auto& c) { return std::to_string(c.train.divergence_patience); },
               [](auto& c, const auto& v) { c.train.divergence_patience = to_size("divergence_patience", v); }}},
         }});
    return out;
  }();
  return s;
}

std::string digest_hex(const EVP_MD* md, std::string_view data) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out, &len, md, nullptr) != 1) throw std::runtime_error("digest failed");
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[out[i] >> 4];
    s += hex[out[i] & 15];
  }
  return s;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("mask file truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

std::map<std::string, std::string> read_key_values(const std::string& text, const std::string& what) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(what + ": bad line '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

const char* mask_role(DomainId d) { return d == DomainId::reference ? "training" : "evaluation-only"; }

}  // namespace

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

ExperimentConfig::ExperimentConfig() {
  train.generator.depth = 2;
  train.discriminator.depth = 3;
}

void ExperimentConfig::validate() const {
  if (methods.empty()) throw ConfigError("methods: at least one method is required");
  if (std::set<TrainMode>(methods.begin(), methods.end()).size() != methods.size()) {
    throw ConfigError("methods: duplicate entry");
  }
  if (sweep_lambda_seg.empty()) throw ConfigError("sweep_lambda_seg: at least one value is required");
  for (double v : sweep_lambda_seg) {
    if (!(v >= 0.0)) throw ConfigError("sweep_lambda_seg: values must be >= 0");
  }
  if (target_domain == DomainId::reference) throw ConfigError("target_domain must differ from the reference domain");
  if (image_size < 8) throw ConfigError("image_size must be >= 8");
  if (raw_size < 32) throw ConfigError("raw_size must be >= 32");
  if (image_size > raw_size) throw ConfigError("image_size must not exceed raw_size");
  if (slices_per_subject < 1) throw ConfigError("slices_per_subject must be >= 1");
  if (!(spacing_mm > 0.0)) throw ConfigError("spacing_mm must be positive");
  const SplitCounts rc = wrap("reference_subjects", [&] { return reference_split_counts(reference_subjects); });
  const SplitCounts tc = wrap("target_subjects", [&] { return target_split_counts(target_subjects); });
  if (rc.validation == 0) throw ConfigError("reference_subjects: too few for a validation split");
  if (tc.validation == 0 || tc.test == 0) throw ConfigError("target_subjects: too few for validation and test splits");
  for (TrainMode m : {TrainMode::susan, TrainMode::supervised}) {
    wrap("train", [&] {
      train_config(m).validate();
      return 0;
    });
  }
  if (image_size % (std::size_t{1} << train.generator.depth) != 0) {
    throw ConfigError("image_size must be divisible by 2^generator.depth");
  }
  if (image_size % (std::size_t{1} << train.discriminator.depth) != 0) {
    throw ConfigError("image_size must be divisible by 2^discriminator.depth");
  }
}

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& [section, fields] : schema()) {
    if (!out.empty()) out += "\n";
    out += "[" + section + "]\n";
    for (const auto& [key, field] : fields) out += key + " = " + field.get(*this) + "\n";
  }
  return out;
}

// Where the run is written does not change what it computes.
std::string ExperimentConfig::hash() const {
  ExperimentConfig c = *this;
  c.output.clear();
  return sha1_hex(c.canonical());
}

std::string ExperimentConfig::dataset_hash() const {
  std::ostringstream o;
  o << "seed=" << seed << "\ntarget_domain=" << to_string(target_domain) << "\nraw_size=" << raw_size
    << "\nslices_per_subject=" << slices_per_subject << "\nspacing_mm=" << num(spacing_mm)
    << "\nreference_subjects=" << reference_subjects << "\ntarget_subjects=" << target_subjects << "\n";
  return sha1_hex(o.str());
}

TrainConfig ExperimentConfig::train_config(TrainMode mode) const {
  TrainConfig t = train;
  t.seed = seed;
  t.mode = mode;
  t.generator.input_size = image_size;
  t.generator.classes = kNumClasses;
  t.generator.translation_head = mode == TrainMode::susan;
  t.discriminator.input_size = image_size;
  return t;
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  ExperimentConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' outside any section");
    const auto it = std::find_if(schema().begin(), schema().end(), [&](const auto& s) { return s.first == section; });
    if (it == schema().end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      const auto f = std::find_if(it->second.begin(), it->second.end(), [&](const auto& k) { return k.first == key; });
      if (f == it->second.end()) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
      f->second.set(c, value.data());
    }
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  return parse_experiment_config(read_file(path));
}

std::string sha1_hex(std::string_view data) { return digest_hex(EVP_sha1(), data); }

std::string git_blob_sha1(std::string_view content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob.append(content);
  return sha1_hex(blob);
}

std::vector<Subject> Dataset::select(const std::vector<std::string>& ids) const {
  std::vector<Subject> out;
  for (const auto& id : ids) {
    auto it = subjects.find(id);
    if (it == subjects.end()) throw ConfigError("dataset lacks subject " + id);
    out.push_back(it->second);
  }
  return out;
}

Dataset generate_dataset(const ExperimentConfig& config) {
  config.validate();
  Dataset d;
  d.split = build_splits(config.reference_subjects, config.target_subjects, config.seed);
  const DomainStyle ref = DomainStyle::preset(DomainId::reference);
  const DomainStyle tgt = DomainStyle::preset(config.target_domain);
  for (std::size_t i = 0; i < config.reference_subjects; ++i) {
    const std::string id = subject_id("ref", i);
    d.subjects[id] = generate_subject(id, ref, derive_seed(config.seed, "subject-ref", i), config.slices_per_subject,
                                      config.raw_size, config.spacing_mm);
  }
  for (std::size_t i = 0; i < config.target_subjects; ++i) {
    const std::string id = subject_id("tgt", i);
    d.subjects[id] = generate_subject(id, tgt, derive_seed(config.seed, "subject-tgt", i), config.slices_per_subject,
                                      config.raw_size, config.spacing_mm);
  }
  return d;
}

std::string encode_masks(const std::vector<LabelMask>& masks) {
  std::string out = "SUSM";
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(masks.size()));
  const std::size_t h = masks.empty() ? 0 : masks.front().height;
  const std::size_t w = masks.empty() ? 0 : masks.front().width;
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(w));
  for (const auto& m : masks) {
    if (m.height != h || m.width != w) throw std::invalid_argument("encode_masks: mixed mask sizes");
    out.append(reinterpret_cast<const char*>(m.labels.data()), m.labels.size());
  }
  return out;
}

std::vector<LabelMask> decode_masks(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "SUSM") != 0) throw FormatError("not a mask file (bad magic)");
  std::size_t pos = 4;
  if (get_u32(bytes, pos) != 1) throw FormatError("unsupported mask file version");
  const std::size_t n = get_u32(bytes, pos);
  const std::size_t h = get_u32(bytes, pos);
  const std::size_t w = get_u32(bytes, pos);
  if (bytes.size() != pos + n * h * w) throw FormatError("mask file length does not match its header");
  std::vector<LabelMask> out;
  for (std::size_t k = 0; k < n; ++k) {
    LabelMask m(h, w);
    std::memcpy(m.labels.data(), bytes.data() + pos, h * w);
    pos += h * w;
    for (auto l : m.labels) {
      if (l >= kNumClasses) throw FormatError("mask label " + std::to_string(l) + " out of range");
    }
    out.push_back(std::move(m));
  }
  return out;
}

void write_dataset(const Dataset& dataset, const ExperimentConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  std::ostringstream info;
  info << "dataset_hash = " << config.dataset_hash() << "\n"
       << "seed = " << config.seed << "\n"
       << "target_domain = " << to_string(config.target_domain) << "\n"
       << "raw_size = " << config.raw_size << "\n"
       << "slices_per_subject = " << config.slices_per_subject << "\n"
       << "spacing_mm = " << num(config.spacing_mm) << "\n"
       << "reference_subjects = " << config.reference_subjects << "\n"
       << "target_subjects = " << config.target_subjects << "\n";
  write_file(dir / "dataset.txt", info.str());

  std::ostringstream splits;
  auto list = [&](const char* name, const std::vector<std::string>& ids) {
    splits << name;
    for (const auto& id : ids) splits << ' ' << id;
    splits << '\n';
  };
  list("reference_train", dataset.split.reference_train);
  list("reference_validation", dataset.split.reference_validation);
  list("target_train", dataset.split.target_train);
  list("target_validation", dataset.split.target_validation);
  list("target_test", dataset.split.target_test);
  write_file(dir / "splits.txt", splits.str());

  std::map<DomainId, std::ostringstream> manifests;
  for (const auto& [id, s] : dataset.subjects) {
    const fs::path ddir = dir / to_string(s.style);
    fs::create_directories(ddir);
    const Shape shape{s.slices.size(), 1, s.slices.front().height, s.slices.front().width};
    Tensor4<float> stack(shape);
    for (std::size_t k = 0; k < s.slices.size(); ++k) {
      std::transform(s.slices[k].pixels.begin(), s.slices[k].pixels.end(), stack.plane(k, 0),
                     [](double v) { return static_cast<float>(v); });
    }
    write_susn(ddir / (id + ".susn"), {{"images", stack}});
    write_file(ddir / (id + ".masks"), encode_masks(s.masks));
    auto& m = manifests[s.style];
    if (m.tellp() == 0) m << "# subject style spacing_mm slices masks\n";
    m << id << ' ' << to_string(s.style) << ' ' << num(s.spacing) << ' ' << s.slices.size() << ' '
      << mask_role(s.style) << '\n';
  }
  for (auto& [domain, text] : manifests) write_file(dir / to_string(domain) / "manifest.txt", text.str());
}

Dataset read_dataset(const fs::path& dir, const ExperimentConfig& config) {
  if (!fs::exists(dir / "dataset.txt")) {
    throw ConfigError("no dataset at " + dir.string() + " (run the generate command first)");
  }
  const auto info = read_key_values(read_file(dir / "dataset.txt"), "dataset.txt");
  const auto h = info.find("dataset_hash");
  if (h == info.end() || h->second != config.dataset_hash()) {
    throw ConfigError("dataset at " + dir.string() + " was generated from a different configuration (hash " +
                      (h == info.end() ? std::string("missing") : h->second) + ", expected " +
                      config.dataset_hash() + ")");
  }
  Dataset d;
  {
    std::istringstream in(read_file(dir / "splits.txt"));
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string name, id;
      ls >> name;
      std::vector<std::string> ids;
      while (ls >> id) ids.push_back(id);
      if (name == "reference_train") d.split.reference_train = ids;
      else if (name == "reference_validation") d.split.reference_validation = ids;
      else if (name == "target_train") d.split.target_train = ids;
      else if (name == "target_validation") d.split.target_validation = ids;
      else if (name == "target_test") d.split.target_test = ids;
      else if (!name.empty()) throw FormatError("splits.txt: unknown list " + name);
    }
  }
  for (DomainId domain : {DomainId::reference, config.target_domain}) {
    const fs::path ddir = dir / to_string(domain);
    std::istringstream in(read_file(ddir / "manifest.txt"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string id, style, spacing, slices, role;
      if (!(ls >> id >> style >> spacing >> slices >> role)) throw FormatError("manifest: bad line '" + line + "'");
      Subject s;
      s.id = id;
      s.style = parse_domain(style);
      if (s.style != domain) throw FormatError("manifest: subject " + id + " has style " + style);
      if (role != mask_role(domain)) throw FormatError("manifest: subject " + id + " has mask role " + role);
      s.spacing = to_double("spacing_mm", spacing);
      const auto tensors = read_susn(ddir / (id + ".susn"));
      if (tensors.size() != 1 || tensors.front().name != "images") throw FormatError(id + ".susn: expected one 'images' tensor");
      const auto& t = tensors.front().tensor;
      const Shape sh = t.shape();
      if (sh.n != to_size("slices", slices) || sh.c != 1) throw FormatError(id + ".susn: shape " + sh.str());
      for (std::size_t k = 0; k < sh.n; ++k) {
        Image img(sh.h, sh.w);
        std::copy(t.plane(k, 0), t.plane(k, 0) + sh.plane(), img.pixels.begin());
        s.slices.push_back(std::move(img));
      }
      if (!fs::exists(ddir / (id + ".masks"))) throw ConfigError("missing ground-truth masks for subject " + id);
      s.masks = decode_masks(read_file(ddir / (id + ".masks")));
      s.validate();
      d.subjects[id] = std::move(s);
    }
  }
  return d;
}

TrainingData training_data(const Dataset& dataset, const ExperimentConfig& config, TrainMode mode) {
  TrainingData t;
  const std::size_t size = config.image_size;
  if (mode == TrainMode::susan) {
    t.labeled_train = make_slice_set(dataset.select(dataset.split.reference_train), size, true);
    t.labeled_validation = make_slice_set(dataset.select(dataset.split.reference_validation), size, true);
    t.unlabeled_train = make_slice_set(dataset.select(dataset.split.target_train), size, false);
    t.unlabeled_validation = make_slice_set(dataset.select(dataset.split.target_validation), size, false);
  } else {
    t.labeled_train = make_slice_set(dataset.select(dataset.split.target_train), size, true);
    t.labeled_validation = make_slice_set(dataset.select(dataset.split.target_validation), size, true);
  }
  return t;
}

double preprocessed_spacing(const ExperimentConfig& config, double raw_spacing) {
  const std::size_t side = crop_side(config.raw_size, config.image_size, kDefaultKeepFraction);
  return raw_spacing * static_cast<double>(side) / static_cast<double>(config.image_size);
}

std::string RunManifest::encode() const {
  std::ostringstream o;
  o << "config_hash = " << config_hash << "\n"
    << "tool_version = " << tool_version << "\n"
    << "precision = " << precision << "\n"
    << "[timings]\n";
  for (const auto& [cmd, s] : timings) o << cmd << " = " << num(s) << "\n";
  o << "[files]\n";
  for (const auto& [path, sha] : files) o << sha << "  " << path << "\n";
  return o.str();
}

RunManifest RunManifest::decode(const std::string& text) {
  RunManifest m;
  std::istringstream in(text);
  std::string line, section;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line;
      continue;
    }
    if (section == "[files]") {
      const auto sep = line.find("  ");
      if (sep == std::string::npos) throw FormatError("manifest: bad file line '" + line + "'");
      m.files[line.substr(sep + 2)] = line.substr(0, sep);
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw FormatError("manifest: bad line '" + line + "'");
    const std::string k = line.substr(0, eq), v = line.substr(eq + 3);
    if (section == "[timings]") {
      m.timings[k] = to_double(k, v);
    } else if (k == "config_hash") {
      m.config_hash = v;
    } else if (k == "tool_version") {
      m.tool_version = v;
    } else if (k == "precision") {
      m.precision = v;
    }
  }
  return m;
}

RunManifest update_manifest(const fs::path& root, const ExperimentConfig& config, Precision precision,
                            const std::string& command, double seconds) {
  RunManifest m;
  const fs::path path = root / kManifestName;
  if (fs::exists(path)) m.timings = RunManifest::decode(read_file(path)).timings;
  m.config_hash = config.hash();
  m.precision = to_string(precision);
  m.timings[command] = seconds;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).generic_string();
    if (rel == kManifestName) continue;
    m.files[rel] = git_blob_sha1(read_file(e.path()));
  }
  write_file(path, m.encode());
  return m;
}

}  // namespace susan
