#include "cowlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

#include "cowlab/rng.hpp"

namespace cowlab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kPatchMagic = "COWLAB-PATCHES\n";
const std::vector<std::string> kStageOrder = {"phantom", "extract", "train-cae", "run", "report"};

const fs::path kPhantomDir = "phantoms";
const fs::path kFeaturesCsv = fs::path("extract") / "features.csv";
const fs::path kPatchStore = fs::path("extract") / "patches.bin";
const fs::path kCaeModel = fs::path("cae") / "model.bin";
const fs::path kCaeLoss = fs::path("cae") / "loss.csv";
const fs::path kCvReports = fs::path("run") / "cv_reports.json";
const fs::path kReportDir = "report";

// Runs body(i) for i in [0, n) on up to `jobs` threads; the first exception
// (lowest index) is rethrown.
void parallel_for(int n, int jobs, const std::function<void(int)>& body) {
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(std::max(n, 0)));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  const int t = std::clamp(jobs, 1, std::max(n, 1));
  std::vector<std::thread> pool;
  for (int k = 1; k < t; ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError("unknown config key: " + (where.empty() ? k : where + "." + k));
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << s;
  if (!os) throw DataError("failed writing " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json parse_json_file(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create directory " + p.string() + ": " + ec.message());
}

void write_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("truncated binary file");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE) throw DataError("bad number in " + what + ": " + s);
  return v;
}

ClassTag parse_tag(const std::string& s) {
  auto t = parse_class_tag(s);
  if (!t) throw DataError("unknown class tag: " + s);
  return *t;
}

std::string relpath(const fs::path& p, const fs::path& base) { return p.lexically_relative(base).generic_string(); }

std::vector<std::string> phantom_ids_from(const Manifest& m) {
  std::vector<std::string> ids;
  try {
    ids = m.doc().at("stages").at("phantom").at("summary").at("ids").get<std::vector<std::string>>();
  } catch (const json::exception&) {
    throw DataError("manifest lacks the phantom id list");
  }
  if (ids.empty()) throw DataError("empty corpus: no phantoms recorded");
  return ids;
}

Volume3D load_phantom_volume(const fs::path& out, const std::string& id) {
  return read_volume(out / kPhantomDir / (id + ".json"));
}

GroundTruth load_phantom_truth(const fs::path& out, const std::string& id) {
  const json t = parse_json_file(out / kPhantomDir / (id + "_truth.json"));
  try {
    return ground_truth_from_json(t.at("graph"), t.at("labels"));
  } catch (const json::exception& e) {
    throw DataError("malformed ground truth for " + id + ": " + e.what());
  }
}

std::string counts_line(const std::vector<ClassTag>& y) {
  std::array<int, kNumClasses> c{};
  for (auto t : y) ++c[static_cast<std::size_t>(index_of(t))];
  std::string s;
  for (int i = 0; i < kNumClasses; ++i) s += (i ? " " : "") + std::string(kClassNames[i]) + "=" + std::to_string(c[i]);
  return s;
}

}  // namespace

std::string to_string(PipelineToggle p) {
  switch (p) {
    case PipelineToggle::geometric: return "geometric";
    case PipelineToggle::cae: return "cae";
    case PipelineToggle::both: return "both";
  }
  return "both";
}

// ---- Config ------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (version != kConfigVersion) throw ConfigError("unsupported config version " + std::to_string(version));
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  {
    std::error_code ec;
    if (fs::exists(output_dir, ec) && !fs::is_directory(output_dir, ec))
      throw ConfigError("output_dir exists and is not a directory: " + output_dir.string());
  }
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (phantom_count < 1) throw ConfigError("phantom.count must be >= 1");
  const auto& v = variability;
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(v.p_hypoplasia) || !prob(v.p_aplasia) || v.p_hypoplasia + v.p_aplasia > 1.0)
    throw ConfigError("phantom.variability probabilities must lie in [0,1] and sum to at most 1");
  if (!(v.jitter_sigma_mm >= 0.0)) throw ConfigError("phantom.variability.jitter_sigma_mm must be >= 0");
  if (!(v.global_rotation_max_deg >= 0.0)) throw ConfigError("phantom.variability.global_rotation_max_deg must be >= 0");
  if (!(noise_sigma >= 0.0)) throw ConfigError("phantom.raster.noise_sigma must be >= 0");
  if (!prob(vessel_intensity) || !prob(background_intensity))
    throw ConfigError("phantom.raster intensities must lie in [0,1]");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("extract.threshold must lie in (0,1)");
  if (!(match_tolerance_mm > 0.0)) throw ConfigError("extract.match_tolerance_mm must be > 0");
  if (!(truncate_mm > 0.0)) throw ConfigError("extract.truncate_mm must be > 0");
  if (geometric_enabled() && dr.empty()) throw ConfigError("dr must list at least one method for the geometric pipeline");
  std::set<std::pair<int, int>> seen_dr;
  for (const auto& d : dr) {
    const std::string name = to_string(d.method);
    if (!seen_dr.insert({static_cast<int>(d.method), d.n_components}).second)
      throw ConfigError("duplicate dr entry " + name);
    if (d.method == DrMethod::none) {
      if (d.n_components != 0) throw ConfigError("dr none takes n_components 0");
    } else if (d.n_components < 1 || d.n_components > kNumGeomFeatures) {
      throw ConfigError("dr " + name + " n_components must lie in [1, 61]");
    }
    if (d.method == DrMethod::lda && d.n_components > kNumClasses - 1)
      throw ConfigError("dr LDA n_components must be at most 13");
  }
  if (classifiers.empty()) throw ConfigError("classifiers must not be empty");
  std::set<Algorithm> seen(classifiers.begin(), classifiers.end());
  if (seen.size() != classifiers.size()) throw ConfigError("duplicate classifier");
  classifier.validate();
  if (folds < 2) throw ConfigError("cv.folds must be >= 2");
  cae_arch.validate();
  if (cae_epochs < 1) throw ConfigError("cae.epochs must be >= 1");
  if (cae_batch < 1) throw ConfigError("cae.batch must be >= 1");
  if (!(cae_learning_rate > 0.0)) throw ConfigError("cae.learning_rate must be > 0");
  if (cae_training_patches < 1) throw ConfigError("cae.training_patches must be >= 1");
}

json ExperimentConfig::to_json() const {
  json drs = json::array();
  for (const auto& d : dr) drs.push_back({{"method", to_string(d.method)}, {"n_components", d.n_components}});
  json algs = json::array();
  for (auto a : classifiers) algs.push_back(cowlab::to_string(a));
  return {
      {"version", version},
      {"seed", seed},
      {"output_dir", output_dir.generic_string()},
      {"jobs", jobs},
      {"phantom",
       {{"count", phantom_count},
        {"variability",
         {{"p_hypoplasia", variability.p_hypoplasia},
          {"p_aplasia", variability.p_aplasia},
          {"jitter_sigma_mm", variability.jitter_sigma_mm},
          {"global_rotation_max_deg", variability.global_rotation_max_deg}}},
        {"raster",
         {{"noise_sigma", noise_sigma},
          {"vessel_intensity", vessel_intensity},
          {"background_intensity", background_intensity}}}}},
      {"extract", {{"threshold", threshold}, {"match_tolerance_mm", match_tolerance_mm}, {"truncate_mm", truncate_mm}}},
      {"pipelines", to_string(pipelines)},
      {"dr", drs},
      {"classifiers", algs},
      {"classifier", classifier.to_json()},
      {"cv", {{"folds", folds}}},
      {"cae",
       {{"architecture", cae_arch.to_json()},
        {"epochs", cae_epochs},
        {"batch", cae_batch},
        {"learning_rate", cae_learning_rate},
        {"training_patches", cae_training_patches}}},
  };
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    check_keys(j, "", {"version", "seed", "output_dir", "jobs", "phantom", "extract", "pipelines", "dr", "classifiers",
                       "classifier", "cv", "cae"});
    if (!j.contains("version")) throw ConfigError("config lacks a version field");
    c.version = j.at("version").get<int>();
    if (c.version != kConfigVersion) throw ConfigError("unsupported config version " + std::to_string(c.version));
    read_opt(j, "seed", c.seed);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    read_opt(j, "jobs", c.jobs);
    if (j.contains("phantom")) {
      const auto& p = j.at("phantom");
      check_keys(p, "phantom", {"count", "variability", "raster"});
      read_opt(p, "count", c.phantom_count);
      if (p.contains("variability")) {
        const auto& v = p.at("variability");
        check_keys(v, "phantom.variability", {"p_hypoplasia", "p_aplasia", "jitter_sigma_mm", "global_rotation_max_deg"});
        read_opt(v, "p_hypoplasia", c.variability.p_hypoplasia);
        read_opt(v, "p_aplasia", c.variability.p_aplasia);
        read_opt(v, "jitter_sigma_mm", c.variability.jitter_sigma_mm);
        read_opt(v, "global_rotation_max_deg", c.variability.global_rotation_max_deg);
      }
      if (p.contains("raster")) {
        const auto& r = p.at("raster");
        check_keys(r, "phantom.raster", {"noise_sigma", "vessel_intensity", "background_intensity"});
        read_opt(r, "noise_sigma", c.noise_sigma);
        read_opt(r, "vessel_intensity", c.vessel_intensity);
        read_opt(r, "background_intensity", c.background_intensity);
      }
    }
    if (j.contains("extract")) {
      const auto& e = j.at("extract");
      check_keys(e, "extract", {"threshold", "match_tolerance_mm", "truncate_mm"});
      read_opt(e, "threshold", c.threshold);
      read_opt(e, "match_tolerance_mm", c.match_tolerance_mm);
      read_opt(e, "truncate_mm", c.truncate_mm);
    }
    if (j.contains("pipelines")) {
      const auto s = j.at("pipelines").get<std::string>();
      if (s == "geometric") c.pipelines = PipelineToggle::geometric;
      else if (s == "cae") c.pipelines = PipelineToggle::cae;
      else if (s == "both") c.pipelines = PipelineToggle::both;
      else throw ConfigError("pipelines must be geometric, cae or both");
    }
    if (j.contains("dr")) {
      c.dr.clear();
      for (const auto& d : j.at("dr")) {
        check_keys(d, "dr[]", {"method", "n_components"});
        DrSelection s;
        s.method = parse_dr_method(d.at("method").get<std::string>());
        s.n_components = d.contains("n_components") ? d.at("n_components").get<int>() : default_components(s.method);
        c.dr.push_back(s);
      }
    }
    if (j.contains("classifiers")) {
      c.classifiers.clear();
      for (const auto& a : j.at("classifiers")) c.classifiers.push_back(parse_algorithm(a.get<std::string>()));
    }
    if (j.contains("classifier")) c.classifier = ClassifierConfig::from_json(j.at("classifier"));
    if (j.contains("cv")) {
      check_keys(j.at("cv"), "cv", {"folds"});
      read_opt(j.at("cv"), "folds", c.folds);
    }
    if (j.contains("cae")) {
      const auto& a = j.at("cae");
      check_keys(a, "cae", {"architecture", "epochs", "batch", "learning_rate", "training_patches"});
      if (a.contains("architecture")) c.cae_arch = CaeArchitecture::from_json(a.at("architecture"));
      read_opt(a, "epochs", c.cae_epochs);
      read_opt(a, "batch", c.cae_batch);
      read_opt(a, "learning_rate", c.cae_learning_rate);
      read_opt(a, "training_patches", c.cae_training_patches);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return c;
}

void apply_override(json& config, const std::string& path, const std::string& value) {
  if (path.empty()) throw ConfigError("empty override key");
  json v;
  try {
    v = json::parse(value);
  } catch (const json::exception&) {
    v = value;
  }
  json* node = &config;
  const auto parts = split(path, '.');
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string& key = parts[i];
    const bool last = i + 1 == parts.size();
    if (key.empty()) throw ConfigError("malformed override key: " + path);
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(key, &used);
        if (used != key.size()) throw std::invalid_argument(key);
      } catch (const std::exception&) {
        throw ConfigError("override " + path + ": '" + key + "' is not an array index");
      }
      if (idx > node->size()) throw ConfigError("override " + path + ": index out of range");
      if (idx == node->size()) node->push_back(json::object());
      node = &(*node)[idx];
    } else if (node->is_object()) {
      if (!node->contains(key) && !last) (*node)[key] = json::object();
      node = &(*node)[key];
    } else {
      throw ConfigError("override " + path + ": '" + parts[i - 1] + "' is not an object");
    }
    if (last) *node = v;
  }
}

ExperimentConfig load_config(const fs::path& file, const std::vector<std::string>& overrides) {
  json j = ExperimentConfig{}.to_json();
  if (!file.empty()) {
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot read config file " + file.string());
    json f;
    try {
      f = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
    }
    if (!f.is_object()) throw ConfigError("config file must hold a JSON object");
    if (!f.contains("version")) throw ConfigError("config file lacks a version field");
    j.merge_patch(f);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + o);
    apply_override(j, o.substr(0, eq), o.substr(eq + 1));
  }
  ExperimentConfig cfg = ExperimentConfig::from_json(j);
  if (const char* env = std::getenv("COWLAB_SEED"); env && *env) {
    const std::string s = env;
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (end != s.c_str() + s.size() || errno == ERANGE || s.front() == '-')
      throw ConfigError("COWLAB_SEED must be an unsigned integer: " + s);
    cfg.seed = v;
  }
  cfg.validate();
  return cfg;
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = cfg.to_json();
  // Neither changes results.
  j.erase("jobs");
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw DataError("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string sha256_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw DataError("SHA-256 init failed");
  }
  std::vector<char> buf(1 << 20);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

// ---- Seeds and phantoms --------------------------------------------------------

std::uint64_t phantom_seed(const ExperimentConfig& cfg, int index) {
  return derive_seed(derive_seed(cfg.seed, 1), static_cast<std::uint64_t>(index));
}
std::uint64_t balance_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.seed, 2); }
std::uint64_t fold_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.seed, 3); }
std::uint64_t pipeline_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.seed, 4); }
std::uint64_t cae_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.seed, 5); }
std::uint64_t cae_subset_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.seed, 6); }

std::string phantom_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom_%03d", index);
  return buf;
}

PhantomSpec phantom_spec(const ExperimentConfig& cfg, int index) {
  PhantomSpec spec = default_cow_template();
  spec.rng_seed = phantom_seed(cfg, index);
  spec.variability = cfg.variability;
  spec.raster.noise_sigma = cfg.noise_sigma;
  spec.raster.vessel_intensity = cfg.vessel_intensity;
  spec.raster.background_intensity = cfg.background_intensity;
  spec.validate();
  return spec;
}

// ---- Extraction ------------------------------------------------------------------

PhantomExtraction extract_phantom(const std::string& volume_id, const Volume3D& volume, const GroundTruth& gt,
                                  const ExperimentConfig& cfg) {
  const SegmentationMask mask = segment(volume, cfg.threshold);
  const VesselGraph g = extract_graph(skeletonize(mask), mask);
  const auto matched = match_to_ground_truth(collect_bifurcations(g, cfg.truncate_mm), gt, cfg.match_tolerance_mm);

  FeatureContext ctx;
  ctx.volume_origin = volume.origin();
  ctx.volume_extent = volume.extent();
  ctx.tree_centroid = tree_centroid(g);
  for (const auto& m : matched) ctx.all_centers.push_back(m.bif.center);

  PhantomExtraction out;
  out.ground_truth_bois = static_cast<int>(gt.labeled_centers.size());
  int index = 0;
  for (const auto& m : matched) {
    BifurcationRecord r;
    try {
      r.features = features(order_branches(m.bif), ctx).values;
    } catch (const DataError&) {
      ++out.skipped_degenerate;
      continue;
    }
    r.volume_id = volume_id;
    r.index = index++;
    r.label = m.label;
    r.center = m.bif.center;
    Index3 v = volume.nearest_voxel(m.bif.center);
    for (int a = 0; a < 3; ++a) v[a] = std::clamp(v[a], 0, volume.dims()[a] - 1);
    r.center_voxel = v;
    r.match_distance_mm = m.match_distance_mm;
    for (const auto& l : gt.labeled_centers) {
      const double d = (l.pos - m.bif.center).norm();
      if (r.nearest_boi_mm < 0.0 || d < r.nearest_boi_mm) r.nearest_boi_mm = d;
    }
    if (r.label != ClassTag::BN) ++out.matched_bois;
    out.rows.push_back(std::move(r));
  }
  return out;
}

Corpus build_corpus(const ExperimentConfig& cfg, int jobs,
                    const std::function<void(int, const PhantomExtraction&)>& on_phantom) {
  cfg.validate();
  std::vector<PhantomExtraction> parts(static_cast<std::size_t>(cfg.phantom_count));
  parallel_for(cfg.phantom_count, jobs, [&](int i) {
    const PhantomSpec spec = phantom_spec(cfg, i);
    const GroundTruth gt = realize(spec);
    const Volume3D v = rasterize(gt.graph, spec.raster, spec.rng_seed);
    parts[static_cast<std::size_t>(i)] = extract_phantom(phantom_id(i), v, gt, cfg);
  });
  Corpus c;
  for (int i = 0; i < cfg.phantom_count; ++i) {
    auto& p = parts[static_cast<std::size_t>(i)];
    if (on_phantom) on_phantom(i, p);
    c.ground_truth_bois += p.ground_truth_bois;
    c.matched_bois += p.matched_bois;
    c.skipped_degenerate += p.skipped_degenerate;
    for (auto& r : p.rows) c.rows.push_back(std::move(r));
  }
  return c;
}

void mark_balanced(Corpus& corpus, std::uint64_t seed) {
  std::vector<ClassTag> y;
  for (const auto& r : corpus.rows) y.push_back(r.label);
  for (auto& r : corpus.rows) r.balanced = false;
  for (auto i : balance_dataset(y, seed)) corpus.rows[i].balanced = true;
}

LabeledDataset balanced_geometric_dataset(const std::vector<BifurcationRecord>& rows) {
  LabeledDataset ds;
  ds.provenance = FeatureProvenance::geometric;
  const auto n = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.balanced; });
  ds.x.resize(n, kNumGeomFeatures);
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    if (!r.balanced) continue;
    for (int k = 0; k < kNumGeomFeatures; ++k) ds.x(i, k) = r.features[static_cast<std::size_t>(k)];
    ds.y.push_back(r.label);
    ++i;
  }
  if (ds.y.empty()) throw DataError("no balanced rows");
  return ds;
}

std::vector<Patch3D> balanced_patches(const std::vector<BifurcationRecord>& rows,
                                      const std::function<Volume3D(const std::string&)>& load_volume, int side) {
  std::vector<Patch3D> out;
  std::string current;
  Volume3D normalized;
  for (const auto& r : rows) {
    if (!r.balanced) continue;
    if (r.volume_id != current) {
      normalized = normalize_volume(load_volume(r.volume_id));
      current = r.volume_id;
    }
    Patch3D p = extract_patch(normalized, r.center_voxel, side);
    p.source_volume_id = r.volume_id;
    p.label = r.label;
    out.push_back(std::move(p));
  }
  return out;
}

// ---- Classification runs -----------------------------------------------------------

std::vector<CvReport> run_geometric(const ExperimentConfig& cfg, const LabeledDataset& data, const FoldPlan& plan,
                                    int jobs) {
  std::vector<CvReport> out;
  for (const auto& d : cfg.dr) {
    for (auto a : cfg.classifiers) {
      PipelineConfig pc;
      pc.algorithm = a;
      pc.dr = d.method;
      pc.n_components = d.n_components;
      pc.classifier = cfg.classifier;
      pc.seed = pipeline_seed(cfg);
      pc.provenance = FeatureProvenance::geometric;
      out.push_back(cross_validate(pc, data, plan, jobs));
    }
  }
  return out;
}

std::vector<CvReport> run_latent(const ExperimentConfig& cfg, const LabeledDataset& latents, const FoldPlan& plan,
                                 int jobs) {
  std::vector<CvReport> out;
  for (auto a : cfg.classifiers) {
    PipelineConfig pc;
    pc.algorithm = a;
    pc.dr = DrMethod::none;
    pc.classifier = cfg.classifier;
    pc.seed = pipeline_seed(cfg);
    pc.provenance = FeatureProvenance::latent;
    out.push_back(cross_validate(pc, latents, plan, jobs));
  }
  return out;
}

std::vector<Patch3D> cae_training_subset(const ExperimentConfig& cfg, const std::vector<Patch3D>& patches) {
  const auto n = static_cast<std::size_t>(cfg.cae_training_patches);
  if (patches.size() <= n) return patches;
  std::vector<std::size_t> idx(patches.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(cae_subset_seed(cfg));
  shuffle_in_place(idx, rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  std::vector<Patch3D> out;
  for (auto i : idx) out.push_back(patches[i]);
  return out;
}

CaeTrainConfig cae_train_config(const ExperimentConfig& cfg) {
  CaeTrainConfig t;
  t.learning_rate = cfg.cae_learning_rate;
  t.batch = cfg.cae_batch;
  t.epochs = cfg.cae_epochs;
  t.seed = cae_seed(cfg);
  return t;
}

// ---- Artifacts ------------------------------------------------------------------------

std::string features_csv(const std::vector<BifurcationRecord>& rows) {
  std::string out = feature_csv_header() +
                    ",volume_id,balanced,center_x_mm,center_y_mm,center_z_mm,voxel_i,voxel_j,voxel_k,"
                    "match_distance_mm,nearest_boi_mm\n";
  for (const auto& r : rows) {
    for (double v : r.features) out += fmt(v) + ",";
    out += std::string(to_string(r.label)) + "," + r.volume_id + "#" + std::to_string(r.index) + "," + r.volume_id +
           "," + (r.balanced ? "1" : "0");
    for (int a = 0; a < 3; ++a) out += "," + fmt(r.center[a]);
    for (int a = 0; a < 3; ++a) out += "," + std::to_string(r.center_voxel[static_cast<std::size_t>(a)]);
    out += "," + fmt(r.match_distance_mm) + "," + fmt(r.nearest_boi_mm) + "\n";
  }
  return out;
}

std::vector<BifurcationRecord> read_features_csv(const fs::path& p) {
  std::istringstream is(read_text(p));
  std::string line;
  constexpr std::size_t kCols = kNumGeomFeatures + 12;
  if (!std::getline(is, line) || line.rfind(feature_csv_header() + ",volume_id,", 0) != 0 ||
      split(line, ',').size() != kCols)
    throw DataError("not a features table: " + p.string());
  std::vector<BifurcationRecord> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    const std::string where = p.string() + ":" + std::to_string(lineno);
    if (f.size() != kCols) throw DataError("wrong column count at " + where);
    BifurcationRecord r;
    for (std::size_t k = 0; k < kNumGeomFeatures; ++k) r.features[k] = parse_double(f[k], where);
    std::size_t c = kNumGeomFeatures;
    r.label = parse_tag(f[c++]);
    const std::string bif_id = f[c++];
    r.volume_id = f[c++];
    const auto hash = bif_id.rfind('#');
    if (hash == std::string::npos || bif_id.substr(0, hash) != r.volume_id)
      throw DataError("bif_id does not match volume_id at " + where);
    r.index = static_cast<int>(parse_double(bif_id.substr(hash + 1), where));
    if (f[c] != "0" && f[c] != "1") throw DataError("balanced flag must be 0 or 1 at " + where);
    r.balanced = f[c++] == "1";
    for (int a = 0; a < 3; ++a) r.center[a] = parse_double(f[c++], where);
    for (int a = 0; a < 3; ++a) r.center_voxel[static_cast<std::size_t>(a)] = static_cast<int>(parse_double(f[c++], where));
    r.match_distance_mm = parse_double(f[c++], where);
    r.nearest_boi_mm = parse_double(f[c++], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_patch_store(const std::vector<Patch3D>& patches, const fs::path& p) {
  const int side = patches.empty() ? kPatchSide : patches.front().side;
  json entries = json::array();
  for (const auto& q : patches) {
    if (q.side != side || q.data.size() != static_cast<std::size_t>(side) * side * side)
      throw DataError("patch store needs equally sized cubic patches");
    entries.push_back({{"volume", q.source_volume_id},
                       {"center", {q.center_voxel[0], q.center_voxel[1], q.center_voxel[2]}},
                       {"label", std::string(to_string(q.label))}});
  }
  const std::string h = json{{"format_version", 1}, {"side", side}, {"count", patches.size()}, {"patches", entries}}.dump();
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << kPatchMagic;
  write_u32(os, static_cast<std::uint32_t>(h.size()));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& q : patches)
    for (float v : q.data) write_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw DataError("failed writing " + p.string());
}

std::vector<Patch3D> read_patch_store(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot open patch store " + p.string());
  std::string magic(std::char_traits<char>::length(kPatchMagic), '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!is || magic != kPatchMagic) throw DataError("not a patch store: " + p.string());
  const std::uint32_t len = read_u32(is);
  std::string h(len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("truncated patch store header");
  std::vector<Patch3D> out;
  try {
    const json header = json::parse(h);
    const int side = header.at("side").get<int>();
    if (side < 1) throw DataError("patch side must be positive");
    const std::size_t voxels = static_cast<std::size_t>(side) * side * side;
    for (const auto& e : header.at("patches")) {
      Patch3D q;
      q.side = side;
      q.source_volume_id = e.at("volume").get<std::string>();
      q.center_voxel = e.at("center").get<Index3>();
      q.label = parse_tag(e.at("label").get<std::string>());
      q.data.resize(voxels);
      for (auto& v : q.data) v = std::bit_cast<float>(read_u32(is));
      out.push_back(std::move(q));
    }
    if (out.size() != header.at("count").get<std::size_t>()) throw DataError("patch count mismatch");
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed patch store header: ") + e.what());
  }
  return out;
}

// ---- Manifest -------------------------------------------------------------------------

Manifest::Manifest(fs::path output_dir) : dir_(std::move(output_dir)) {
  const fs::path p = dir_ / "manifest.json";
  std::error_code ec;
  if (fs::exists(p, ec)) {
    doc_ = parse_json_file(p);
    if (!doc_.is_object() || !doc_.contains("stages")) throw DataError("malformed manifest " + p.string());
  } else {
    doc_ = {{"format_version", 1}, {"stages", json::object()}};
  }
}

bool Manifest::has_stage(const std::string& stage) const { return doc_.at("stages").contains(stage); }

void Manifest::verify_inputs(const std::string& stage) const {
  if (!has_stage(stage))
    throw DataError("missing inputs: stage '" + stage + "' has not been run in " + dir_.string());
  for (const auto& [rel, sum] : doc_.at("stages").at(stage).at("artifacts").items()) {
    const fs::path p = dir_ / rel;
    std::error_code ec;
    if (!fs::exists(p, ec)) throw DataError("missing artifact " + p.string());
    if (sha256_file(p) != sum.get<std::string>()) throw DataError("checksum mismatch for " + p.string());
  }
}

void Manifest::record(const std::string& stage, const ExperimentConfig& cfg, const StageResult& result) {
  const std::string hash = config_hash(cfg);
  json artifacts = json::object();
  for (const auto& p : result.artifacts) artifacts[relpath(p, dir_)] = sha256_file(p);
  auto& stages = doc_["stages"];
  if (stages.contains(stage) && stages[stage].at("config_hash") == hash) {
    const auto& old = stages[stage].at("artifacts");
    for (const auto& [rel, sum] : artifacts.items())
      if (old.contains(rel) && old.at(rel) != sum)
        throw DataError("rerun of '" + stage + "' produced different bytes for " + rel);
    for (const auto& [rel, sum] : old.items())
      if (!artifacts.contains(rel)) throw DataError("rerun of '" + stage + "' no longer produces " + rel);
  } else {
    // Later stages were computed from the superseded outputs.
    bool later = false;
    for (const auto& s : kStageOrder) {
      if (later) stages.erase(s);
      if (s == stage) later = true;
    }
  }
  stages[stage] = {{"config_hash", hash},
                   {"config", cfg.to_json()},
                   {"seeds", result.seeds},
                   {"summary", result.summary},
                   {"artifacts", artifacts}};
  doc_["config_hash"] = hash;
  save();
}

void Manifest::save() const { write_text(dir_ / "manifest.json", doc_.dump(2) + "\n"); }

// ---- Stages ----------------------------------------------------------------------------

StageResult cmd_phantom(const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  std::vector<PhantomSpec> specs;
  for (int i = 0; i < cfg.phantom_count; ++i) specs.push_back(phantom_spec(cfg, i));
  Manifest manifest(cfg.output_dir);
  const fs::path dir = cfg.output_dir / kPhantomDir;
  ensure_dir(dir);

  std::vector<int> labeled(specs.size(), 0);
  parallel_for(cfg.phantom_count, cfg.jobs, [&](int i) {
    const auto& spec = specs[static_cast<std::size_t>(i)];
    const GroundTruth gt = realize(spec);
    const Volume3D v = rasterize(gt.graph, spec.raster, spec.rng_seed);
    write_volume(v, dir / (phantom_id(i) + ".json"));
    write_text(dir / (phantom_id(i) + "_truth.json"), ground_truth_to_json(gt).dump() + "\n");
    labeled[static_cast<std::size_t>(i)] = static_cast<int>(gt.labeled_centers.size());
  });

  StageResult r;
  json ids = json::array(), seeds = json::array();
  int total = 0;
  for (int i = 0; i < cfg.phantom_count; ++i) {
    const std::string id = phantom_id(i);
    r.artifacts.push_back(dir / (id + ".json"));
    r.artifacts.push_back(dir / (id + ".raw"));
    r.artifacts.push_back(dir / (id + "_truth.json"));
    ids.push_back(id);
    seeds.push_back(specs[static_cast<std::size_t>(i)].rng_seed);
    total += labeled[static_cast<std::size_t>(i)];
  }
  r.seeds = {{"master", cfg.seed}, {"phantoms", seeds}};
  r.summary = {{"ids", ids}, {"labeled_centers", total}};
  manifest.record("phantom", cfg, r);
  if (log) log("wrote " + std::to_string(cfg.phantom_count) + " phantoms with " + std::to_string(total) + " labeled BoIs");
  return r;
}

StageResult cmd_extract(const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  Manifest manifest(cfg.output_dir);
  manifest.verify_inputs("phantom");
  const auto ids = phantom_ids_from(manifest);
  const fs::path out = cfg.output_dir;

  std::vector<PhantomExtraction> parts(ids.size());
  parallel_for(static_cast<int>(ids.size()), cfg.jobs, [&](int i) {
    const auto& id = ids[static_cast<std::size_t>(i)];
    parts[static_cast<std::size_t>(i)] = extract_phantom(id, load_phantom_volume(out, id), load_phantom_truth(out, id), cfg);
  });
  Corpus corpus;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto& p = parts[i];
    const auto bns = std::count_if(p.rows.begin(), p.rows.end(), [](const auto& r) { return r.label == ClassTag::BN; });
    if (log)
      log(ids[i] + ": " + std::to_string(p.matched_bois) + "/" + std::to_string(p.ground_truth_bois) + " BoIs, " +
          std::to_string(bns) + " BNs, " + std::to_string(p.skipped_degenerate) + " degenerate skipped");
    corpus.ground_truth_bois += p.ground_truth_bois;
    corpus.matched_bois += p.matched_bois;
    corpus.skipped_degenerate += p.skipped_degenerate;
    for (auto& r : p.rows) corpus.rows.push_back(std::move(r));
  }
  if (corpus.rows.empty()) throw DataError("extraction found no bifurcations");
  mark_balanced(corpus, balance_seed(cfg));
  const auto patches = balanced_patches(
      corpus.rows, [&](const std::string& id) { return load_phantom_volume(out, id); }, cfg.cae_arch.input_side);

  ensure_dir(out / "extract");
  write_text(out / kFeaturesCsv, features_csv(corpus.rows));
  write_patch_store(patches, out / kPatchStore);

  std::vector<ClassTag> y;
  for (const auto& r : corpus.rows)
    if (r.balanced) y.push_back(r.label);
  const auto total_bns =
      std::count_if(corpus.rows.begin(), corpus.rows.end(), [](const auto& r) { return r.label == ClassTag::BN; });
  StageResult r;
  r.artifacts = {out / kFeaturesCsv, out / kPatchStore};
  r.seeds = {{"balance", balance_seed(cfg)}};
  r.summary = {{"ground_truth_bois", corpus.ground_truth_bois},
               {"matched_bois", corpus.matched_bois},
               {"bns", total_bns},
               {"skipped_degenerate", corpus.skipped_degenerate},
               {"balanced_rows", y.size()}};
  manifest.record("extract", cfg, r);
  if (log) {
    log("BoIs matched " + std::to_string(corpus.matched_bois) + " of " + std::to_string(corpus.ground_truth_bois) +
        ", BNs " + std::to_string(total_bns) + ", degenerate skipped " + std::to_string(corpus.skipped_degenerate));
    log("balanced set: " + counts_line(y));
  }
  return r;
}

StageResult cmd_train_cae(const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  if (!cfg.cae_enabled()) throw ConfigError("train-cae needs pipelines set to cae or both");
  Manifest manifest(cfg.output_dir);
  manifest.verify_inputs("extract");
  const fs::path out = cfg.output_dir;
  const auto patches = read_patch_store(out / kPatchStore);
  for (const auto& p : patches)
    if (p.side != cfg.cae_arch.input_side) throw DataError("patch side does not match cae.architecture.input_side");
  const auto subset = cae_training_subset(cfg, patches);
  if (log) log("training on " + std::to_string(subset.size()) + " of " + std::to_string(patches.size()) + " patches");
  const CaeModel model = train_cae(cfg.cae_arch, subset, cae_train_config(cfg), [&](int epoch, double mse) {
    if (log) log("epoch " + std::to_string(epoch) + " mse " + fmt(mse));
  });
  ensure_dir(out / "cae");
  write_cae(model, out / kCaeModel);
  write_loss_log(model, out / kCaeLoss);
  StageResult r;
  r.artifacts = {out / kCaeModel, out / kCaeLoss};
  r.seeds = {{"cae", cae_seed(cfg)}, {"subset", cae_subset_seed(cfg)}};
  r.summary = {{"training_patches", subset.size()}, {"final_mse", model.loss_log.back()}};
  manifest.record("train-cae", cfg, r);
  return r;
}

StageResult cmd_run(const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  Manifest manifest(cfg.output_dir);
  manifest.verify_inputs("extract");
  if (cfg.cae_enabled()) manifest.verify_inputs("train-cae");
  const fs::path out = cfg.output_dir;

  const auto rows = read_features_csv(out / kFeaturesCsv);
  const LabeledDataset geometric = balanced_geometric_dataset(rows);
  const FoldPlan plan = stratified_folds(geometric.y, cfg.folds, fold_seed(cfg));
  if (log) {
    log("balanced set: " + counts_line(geometric.y));
    for (auto t : plan.sparse_classes)
      log("class " + std::string(to_string(t)) + " has fewer samples than folds");
  }

  std::vector<CvReport> reports;
  if (cfg.geometric_enabled()) {
    for (auto& rep : run_geometric(cfg, geometric, plan, cfg.jobs)) {
      if (log) log(rep.config.label() + " accuracy " + fmt(rep.mean_accuracy) + " macro-F1 " + fmt(rep.mean_macro_f1));
      reports.push_back(std::move(rep));
    }
  }
  if (cfg.cae_enabled()) {
    const auto patches = read_patch_store(out / kPatchStore);
    if (patches.size() != geometric.y.size()) throw DataError("patch store does not match the balanced feature rows");
    for (std::size_t i = 0; i < patches.size(); ++i)
      if (patches[i].label != geometric.y[i]) throw DataError("patch store labels disagree with the feature rows");
    const CaeModel model = read_cae(out / kCaeModel);
    const LabeledDataset latents = encode_dataset(model, patches);
    for (auto& rep : run_latent(cfg, latents, plan, cfg.jobs)) {
      if (log) log(rep.config.label() + " accuracy " + fmt(rep.mean_accuracy) + " macro-F1 " + fmt(rep.mean_macro_f1));
      reports.push_back(std::move(rep));
    }
  }

  json all = json::array();
  for (const auto& rep : reports) all.push_back(rep.to_json());
  ensure_dir(out / "run");
  write_text(out / kCvReports, json{{"format_version", 1}, {"reports", all}}.dump(2) + "\n");
  StageResult r;
  r.artifacts.push_back(out / kCvReports);
  for (auto& p : emit_report(reports, out / kReportDir)) r.artifacts.push_back(p);
  r.seeds = {{"folds", fold_seed(cfg)}, {"pipeline", pipeline_seed(cfg)}};
  r.summary = {{"reports", reports.size()}, {"samples", geometric.y.size()}};
  manifest.record("run", cfg, r);
  return r;
}

StageResult cmd_report(const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  Manifest manifest(cfg.output_dir);
  manifest.verify_inputs("run");
  const fs::path out = cfg.output_dir;
  const json doc = parse_json_file(out / kCvReports);
  std::vector<CvReport> reports;
  try {
    for (const auto& j : doc.at("reports")) reports.push_back(CvReport::from_json(j));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed cv reports: ") + e.what());
  }
  StageResult r;
  r.artifacts = emit_report(reports, out / kReportDir);
  r.summary = {{"reports", reports.size()}};
  manifest.record("report", cfg, r);
  if (log) log("wrote " + std::to_string(r.artifacts.size()) + " report files");
  return r;
}

}  // namespace cowlab
