#include "pipeline.hpp"

#include <openssl/evp.h>
#include <openssl/opensslv.h>

#include <Eigen/Core>
#include <boost/version.hpp>
#include <chrono>
#include <charconv>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "regime/basic.hpp"
#include "regime/cart.hpp"
#include "regime/errors.hpp"
#include "regime/format.hpp"
#include "regime/gp.hpp"
#include "regime/hmm.hpp"
#include "regime/hmm_bayes.hpp"
#include "regime/imgpe.hpp"
#include "regime/lds.hpp"
#include "regime/parallel.hpp"
#include "regime/random.hpp"
#include "regime/slds.hpp"

namespace regime::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

bool parse_number(const std::string& s, double& v) {
  if (s.empty()) return false;
  const char* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  return res.ec == std::errc() && res.ptr == end && std::isfinite(v);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  while (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

struct CountsFile {
  std::vector<double> times;
  std::vector<std::string> species;
  std::vector<std::vector<double>> rows;
};

CountsFile read_counts(const fs::path& path) {
  const auto lines = lines_of(read_file(path));
  const std::string where = path.string();
  if (lines.empty()) throw ConfigError(where + ": empty counts file");
  CountsFile f;
  const auto header = split_tabs(lines[0]);
  if (header.size() < 2) throw ConfigError(where + ":1: header needs a label and at least one sample time");
  for (std::size_t j = 1; j < header.size(); ++j) {
    double t;
    if (!parse_number(header[j], t)) throw ConfigError(where + ":1: sample time '" + header[j] + "' is not numeric");
    if (!f.times.empty() && !(t > f.times.back())) throw ConfigError(where + ":1: sample times must increase");
    f.times.push_back(t);
  }
  std::set<std::string> seen;
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const std::string at = where + ":" + std::to_string(l + 1);
    const auto cells = split_tabs(lines[l]);
    if (cells.size() != header.size())
      throw ConfigError(at + ": expected " + std::to_string(header.size()) + " fields, found " +
                        std::to_string(cells.size()));
    if (cells[0].empty()) throw ConfigError(at + ": empty species id");
    if (!seen.insert(cells[0]).second) throw ConfigError(at + ": duplicate species '" + cells[0] + "'");
    std::vector<double> row;
    for (std::size_t j = 1; j < cells.size(); ++j) {
      double v;
      if (!parse_number(cells[j], v)) throw ConfigError(at + ": count '" + cells[j] + "' is not numeric");
      if (v < 0) throw ConfigError(at + ": negative count");
      row.push_back(v);
    }
    f.species.push_back(cells[0]);
    f.rows.push_back(std::move(row));
  }
  return f;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---- config blocks -------------------------------------------------------

class Block {
 public:
  Block(const json& src, std::string where) : src_(src), where_(std::move(where)) {
    if (!src_.is_object()) throw ConfigError(where_ + " must be a JSON object");
    out_ = json::object();
  }

  template <typename T>
  T get(const std::string& key, T def) {
    used_.insert(key);
    T v = def;
    if (src_.contains(key) && !src_.at(key).is_null()) v = convert<T>(src_.at(key), key);
    out_[key] = v;
    return v;
  }

  template <typename T>
  std::optional<T> optional(const std::string& key) {
    used_.insert(key);
    if (!src_.contains(key) || src_.at(key).is_null()) {
      out_[key] = nullptr;
      return std::nullopt;
    }
    T v = convert<T>(src_.at(key), key);
    out_[key] = v;
    return v;
  }

  const json* raw(const std::string& key) {
    used_.insert(key);
    return src_.contains(key) ? &src_.at(key) : nullptr;
  }

  void record(const std::string& key, json v) { out_[key] = std::move(v); }

  json finish() {
    for (const auto& [k, v] : src_.items())
      if (!used_.count(k)) throw ConfigError("unknown key '" + where_ + "." + k + "'");
    return out_;
  }

  const std::string& where() const { return where_; }

 private:
  template <typename T>
  T convert(const json& v, const std::string& key) const {
    const std::string name = where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(name + " must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(name + " must be non-negative");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name + " must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name + " must be a string");
    }
    return v.get<T>();
  }

  const json& src_;
  std::string where_;
  std::set<std::string> used_;
  json out_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

std::string pick_one(Block& b, const std::string& key, const std::string& def, const std::vector<std::string>& allowed) {
  const std::string v = b.get<std::string>(key, def);
  if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    throw ConfigError(b.where() + "." + key + " must be one of: " + list);
  }
  return v;
}

// Scalar or nested array -> matrix.
Matrix matrix_value(const json& v, const std::string& name) {
  if (v.is_number()) return Matrix::Constant(1, 1, v.get<double>());
  require(v.is_array() && !v.empty(), name + " must be a number or a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(v.size());
  const auto cols = static_cast<Eigen::Index>(v[0].is_array() ? v[0].size() : 1);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const json& r = v[static_cast<std::size_t>(i)];
    if (r.is_number()) {
      require(cols == 1, name + " rows must all be arrays of equal length");
      m(i, 0) = r.get<double>();
      continue;
    }
    require(r.is_array() && static_cast<Eigen::Index>(r.size()) == cols, name + " rows must have equal length");
    for (Eigen::Index j = 0; j < cols; ++j) {
      require(r[static_cast<std::size_t>(j)].is_number(), name + " entries must be numbers");
      m(i, j) = r[static_cast<std::size_t>(j)].get<double>();
    }
  }
  return m;
}

json matrix_json(const Matrix& m) {
  if (m.size() == 1) return m(0, 0);
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    out.push_back(r);
  }
  return out;
}

Matrix get_matrix(Block& b, const std::string& key, const Matrix& def) {
  const json* v = b.raw(key);
  const Matrix m = v && !v->is_null() ? matrix_value(*v, b.where() + "." + key) : def;
  b.record(key, matrix_json(m));
  return m;
}

void positive(double v, const std::string& name) { require(v > 0.0 && std::isfinite(v), name + " must be positive"); }
void nonneg(double v, const std::string& name) { require(v >= 0.0 && std::isfinite(v), name + " must be >= 0"); }

void chain_keys(Block& b, int iterations, int burn_in) {
  const int it = b.get<int>("iterations", iterations);
  const int burn = b.get<int>("burn_in", burn_in);
  const int thin = b.get<int>("thinning", 1);
  require(it >= 1, b.where() + ".iterations must be >= 1");
  require(burn >= 0 && burn < it, b.where() + ".burn_in must be in [0, iterations)");
  require(thin >= 1, b.where() + ".thinning must be >= 1");
}

json method_params(const std::string& method, const json& src) {
  Block b(src, "params");
  if (method == "hclust" || method == "cart") {
    const std::string d = pick_one(b, "distance", "euclidean", {"euclidean", "jaccard", "manhattan", "mixture"});
    pick_one(b, "linkage", "average", {"single", "complete", "average"});
    b.get<bool>("jaccard_union", false);
    if (const json* mix = b.raw("mixture"); mix && !mix->is_null()) {
      require(mix->is_array(), "params.mixture must be an array");
      json rec = json::array();
      for (const auto& part : *mix) {
        Block pb(part, "params.mixture[]");
        pick_one(pb, "distance", "euclidean", {"euclidean", "jaccard", "manhattan"});
        nonneg(pb.get<double>("weight", 0.0), "params.mixture[].weight");
        rec.push_back(pb.finish());
      }
      b.record("mixture", rec);
    } else {
      require(d != "mixture", "params.mixture is required when distance is 'mixture'");
      b.record("mixture", nullptr);
    }
  }
  if (method == "hclust") {
    require(b.get<int>("clusters", 4) >= 1, "params.clusters must be >= 1");
  } else if (method == "cart") {
    b.get<std::string>("subject", "");
    require(b.get<int>("max_splits", 10) >= 0, "params.max_splits must be >= 0");
    nonneg(b.get<double>("k", 0.0), "params.k");
    require(b.get<int>("min_leaf", 5) >= 1, "params.min_leaf must be >= 1");
    b.get<bool>("hurdle", false);
  } else if (method == "lds-demo") {
    require(b.get<int>("T", 50) >= 1, "params.T must be >= 1");
    get_matrix(b, "A", Matrix::Constant(1, 1, 0.9));
    get_matrix(b, "C", Matrix::Constant(1, 1, 1.0));
    get_matrix(b, "Q", Matrix::Constant(1, 1, 0.1));
    get_matrix(b, "R", Matrix::Constant(1, 1, 0.2));
    get_matrix(b, "initial_mean", Matrix::Zero(1, 1));
    get_matrix(b, "initial_cov", Matrix::Constant(1, 1, 1.0));
    b.optional<double>("tobit_threshold");
    require(b.get<int>("tobit_iterations", 200) >= 1, "params.tobit_iterations must be >= 1");
  } else if (method == "gp") {
    require(b.optional<std::string>("data").has_value(), "params.data (x, y TSV path) is required");
    pick_one(b, "variant", "isotropic", {"isotropic", "per-axis"});
    b.get<double>("log_signal_var", 0.0);
    b.get<double>("log_lengthscale", 0.0);
    nonneg(b.get<double>("noise_var", 0.1), "params.noise_var");
    pick_one(b, "objective", "marginal", {"marginal", "loo", "none"});
    require(b.get<int>("budget", 100) >= 0, "params.budget must be >= 0");
    b.get<bool>("optimize_noise", true);
    require(b.get<int>("grid_points", 100) >= 2, "params.grid_points must be >= 2");
  } else if (method == "hmm-em") {
    require(b.get<int>("K", 2) >= 1, "params.K must be >= 1");
    pick_one(b, "sequences", "species", {"species", "subjects"});
    require(b.get<int>("max_iter", 200) >= 1, "params.max_iter must be >= 1");
    nonneg(b.get<double>("tol", 1e-6), "params.tol");
    pick_one(b, "covariance", "auto", {"auto", "full", "diagonal"});
  } else if (method == "hmm-sticky") {
    require(b.get<int>("K", 4) >= 1, "params.K must be >= 1");
    positive(b.get<double>("alpha", 1.0), "params.alpha");
    nonneg(b.get<double>("kappa", 0.0), "params.kappa");
    pick_one(b, "sequences", "species", {"species", "subjects"});
    chain_keys(b, 1000, 200);
  } else if (method == "hdp-hmm") {
    require(b.get<int>("L", 10) >= 1, "params.L must be >= 1");
    positive(b.get<double>("gamma", 1.0), "params.gamma");
    positive(b.get<double>("alpha", 1.0), "params.alpha");
    nonneg(b.get<double>("kappa", 0.0), "params.kappa");
    b.get<bool>("textbook_crt", false);
    pick_one(b, "sequences", "species", {"species", "subjects"});
    chain_keys(b, 1000, 200);
  } else if (method == "imgpe") {
    b.get<std::string>("subject", "");
    b.get<std::string>("species", "");
    nonneg(b.get<double>("alpha", 1.0), "params.alpha");
    const int it = b.get<int>("iterations", 500);
    require(it >= 1, "params.iterations must be >= 1");
    const int burn = b.get<int>("burn_in", 100);
    require(burn >= 0 && burn < it, "params.burn_in must be in [0, iterations)");
    positive(b.get<double>("step_size", 0.005), "params.step_size");
    require(b.get<int>("leapfrog_steps", 5) >= 0, "params.leapfrog_steps must be >= 0");
  } else if (method == "slds") {
    b.get<std::string>("subject", "");
    require(b.get<int>("K", 2) >= 1, "params.K must be >= 1");
    chain_keys(b, 300, 100);
    require(b.get<int>("max_series", 0) >= 0, "params.max_series must be >= 0");
    const double lo = b.get<double>("clip_lower", -1.1), hi = b.get<double>("clip_upper", 2.1);
    require(lo < hi, "params.clip_lower must be below params.clip_upper");
  } else if (method == "basic") {
    b.get<std::string>("subject", "");
    pick_one(b, "model", "gaussian", {"gaussian", "bernoulli"});
    require(b.get<int>("grid", 50) >= 1, "params.grid must be >= 1");
    const int it = b.get<int>("iterations", 200);
    require(it >= 1, "params.iterations must be >= 1");
    const int burn = b.get<int>("burn_in", 50);
    require(burn >= 0 && burn < it, "params.burn_in must be in [0, iterations)");
    require(b.get<int>("eb_rounds", 1) >= 0, "params.eb_rounds must be >= 0");
    b.get<bool>("eb_model", false);
    require(b.get<int>("jitter_per_sweep", -1) >= -1, "params.jitter_per_sweep must be >= -1");
  }
  return b.finish();
}

bool needs_panel(const std::string& method) { return method != "lds-demo" && method != "gp"; }

// ---- outputs -------------------------------------------------------------

class Tsv {
 public:
  explicit Tsv(std::initializer_list<std::string> header) {
    bool first = true;
    for (const auto& h : header) {
      os_ << (first ? "" : "\t") << h;
      first = false;
    }
    os_ << '\n';
  }
  explicit Tsv(const std::vector<std::string>& header) {
    for (std::size_t j = 0; j < header.size(); ++j) os_ << (j ? "\t" : "") << header[j];
    os_ << '\n';
  }
  Tsv& cell(const std::string& s) {
    os_ << (first_ ? "" : "\t") << s;
    first_ = false;
    return *this;
  }
  Tsv& cell(double v) { return cell(format_double(v)); }
  Tsv& cell(int v) { return cell(std::to_string(v)); }
  Tsv& cell(long v) { return cell(std::to_string(v)); }
  Tsv& cell(std::size_t v) { return cell(std::to_string(v)); }
  void end() {
    os_ << '\n';
    first_ = true;
  }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
  bool first_ = true;
};

std::string matrix_tsv(const Matrix& m, const std::string& row_label, const std::string& col_prefix) {
  std::vector<std::string> header{row_label};
  for (Eigen::Index j = 0; j < m.cols(); ++j) header.push_back(col_prefix + std::to_string(j));
  Tsv t(header);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    t.cell(static_cast<long>(i));
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.cell(m(i, j));
    t.end();
  }
  return t.str();
}

using Outputs = std::map<std::string, std::string>;

struct Context {
  const PipelineConfig& cfg;
  const json& p;
  std::optional<core::SeriesPanel> raw;  // after the prevalence filter
  std::optional<core::SeriesPanel> panel;  // after the transform
  std::vector<std::string> warnings;

  std::uint64_t seed_for(const std::string& tag, std::uint64_t index = 0) const {
    return Rng::substream(cfg.seed, {fnv1a(cfg.method), fnv1a(tag), index}).seed();
  }

  std::size_t subject_index(const std::string& key = "subject") const {
    const std::string name = p.value(key, std::string());
    if (name.empty()) return 0;
    for (std::size_t s = 0; s < panel->subjects.size(); ++s)
      if (panel->subjects[s] == name) return s;
    throw ConfigError("params." + key + ": no subject named '" + name + "'");
  }
};

core::DistanceSpec distance_spec(const json& p) {
  core::DistanceSpec spec;
  spec.kind = core::parse_distance(p.at("distance").get<std::string>());
  spec.jaccard_union = p.at("jaccard_union").get<bool>();
  if (!p.at("mixture").is_null())
    for (const auto& part : p.at("mixture"))
      spec.mixture.emplace_back(core::parse_distance(part.at("distance").get<std::string>()),
                                part.at("weight").get<double>());
  return spec;
}

void run_hclust(Context& c, Outputs& out) {
  const core::SeriesPanel& panel = *c.panel;
  const Matrix rows = panel.concatenated();
  if (rows.rows() < 1) throw ConfigError("no species survive the prevalence filter");
  const Matrix dist = core::pairwise_distance(rows, distance_spec(c.p));
  const core::Dendrogram tree = core::hclust(dist, rows, core::parse_linkage(c.p.at("linkage").get<std::string>()));
  const int k = std::min<int>(c.p.at("clusters").get<int>(), tree.num_leaves);
  const std::vector<int> labels = core::cut_tree(tree, k);

  Tsv merges({"step", "left", "right", "height", "size"});
  for (std::size_t m = 0; m < tree.merges.size(); ++m) {
    const auto& mg = tree.merges[m];
    merges.cell(m).cell(mg.left).cell(mg.right).cell(mg.height).cell(mg.size).end();
  }
  out["merges.tsv"] = merges.str();
  Tsv order({"position", "species"});
  std::vector<std::string> species_order;
  for (std::size_t j = 0; j < tree.leaf_order.size(); ++j) {
    const auto& name = panel.species[static_cast<std::size_t>(tree.leaf_order[j])];
    order.cell(j).cell(name).end();
    species_order.push_back(name);
  }
  out["leaf_order.tsv"] = order.str();
  Tsv clusters({"species", "cluster"});
  for (std::size_t s = 0; s < labels.size(); ++s) clusters.cell(panel.species[s]).cell(labels[s]).end();
  out["clusters.tsv"] = clusters.str();

  const core::SummaryResult sum = core::cluster_summaries(panel, labels, k);
  for (const auto& w : sum.warnings) c.warnings.push_back(w);
  Tsv st({"cluster", "subject", "time", "presence", "conditional_mean"});
  for (const auto& cs : sum.summaries)
    for (std::size_t t = 0; t < cs.times.size(); ++t) {
      st.cell(cs.cluster).cell(cs.subject).cell(cs.times[t]).cell(cs.presence[t]);
      st.cell(cs.conditional_mean[t] ? format_double(*cs.conditional_mean[t]) : std::string("NA")).end();
    }
  out["summaries.tsv"] = st.str();

  std::vector<HeatmapRow> hm;
  for (std::size_t s = 0; s < panel.num_subjects(); ++s)
    for (std::size_t j = 0; j < panel.num_species(); ++j)
      for (std::size_t t = 0; t < panel.times[s].size(); ++t)
        hm.push_back({panel.subjects[s], panel.species[j], panel.times[s][t],
                      panel.counts[s](static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(t))});
  out["heatmap.tsv"] = heatmap_tsv(hm, "value", panel.subjects, species_order);
}

void run_cart(Context& c, Outputs& out) {
  const core::SeriesPanel& panel = *c.panel;
  const std::size_t s = c.subject_index();
  const Matrix& values = panel.counts[s];
  if (values.rows() < 1) throw ConfigError("no species survive the prevalence filter");
  const core::Dendrogram tree = core::hclust(core::pairwise_distance(values, distance_spec(c.p)), values,
                                             core::parse_linkage(c.p.at("linkage").get<std::string>()));
  Matrix x;
  Vector y;
  cart::grid_design(values, tree.leaf_order, panel.times[s], x, y);
  cart::TreeConfig tc;
  tc.max_splits = c.p.at("max_splits").get<int>();
  tc.k = c.p.at("k").get<double>();
  tc.min_leaf = c.p.at("min_leaf").get<int>();
  Tsv order({"position", "species"});
  for (std::size_t j = 0; j < tree.leaf_order.size(); ++j)
    order.cell(j).cell(panel.species[static_cast<std::size_t>(tree.leaf_order[j])]).end();
  out["species_order.tsv"] = order.str();
  if (c.p.at("hurdle").get<bool>()) {
    if ((y.array() < 0).any()) throw ConfigError("hurdle trees need a non-negative transform");
    const cart::HurdleFit h = cart::fit_hurdle(x, y, tc);
    out["presence_partition.tsv"] = cart::partition_tsv(cart::extract_partition(h.presence, x));
    if (h.conditional) {
      out["conditional_partition.tsv"] = cart::partition_tsv(cart::extract_partition(*h.conditional, x));
    } else {
      c.warnings.push_back("no positive cells: conditional tree absent");
    }
  } else {
    out["partition.tsv"] = cart::partition_tsv(cart::extract_partition(cart::fit_tree(x, y, tc), x));
  }
}

void run_lds_demo(Context& c, Outputs& out) {
  lds::LdsParams p;
  p.A = matrix_value(c.p.at("A"), "A");
  p.C = matrix_value(c.p.at("C"), "C");
  p.Q = matrix_value(c.p.at("Q"), "Q");
  p.R = matrix_value(c.p.at("R"), "R");
  p.initial.mean = matrix_value(c.p.at("initial_mean"), "initial_mean").reshaped();
  p.initial.cov = matrix_value(c.p.at("initial_cov"), "initial_cov");
  try {
    p.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("lds-demo system: ") + e.what());
  }
  const int T = c.p.at("T").get<int>();
  Rng rng(c.seed_for("simulate"));
  const auto [z, x] = lds::simulate(p, T, rng);
  const auto filt = lds::kalman_filter(p, x);
  const auto smooth = lds::rts_smooth(p, filt);

  std::vector<std::string> header{"t"};
  for (int d = 0; d < p.state_dim(); ++d) header.push_back("z" + std::to_string(d));
  for (int d = 0; d < p.obs_dim(); ++d) header.push_back("x" + std::to_string(d));
  Tsv sim(header);
  for (int t = 0; t < T; ++t) {
    sim.cell(t + 1);
    for (Eigen::Index d = 0; d < z[static_cast<std::size_t>(t)].size(); ++d) sim.cell(z[static_cast<std::size_t>(t)][d]);
    for (Eigen::Index d = 0; d < x[static_cast<std::size_t>(t)].size(); ++d) sim.cell(x[static_cast<std::size_t>(t)][d]);
    sim.end();
  }
  out["simulated.tsv"] = sim.str();
  auto beliefs = [&](const std::vector<GaussianBelief>& bs) {
    Tsv b({"t", "dim", "mean", "var"});
    for (std::size_t t = 0; t < bs.size(); ++t)
      for (Eigen::Index d = 0; d < bs[t].mean.size(); ++d)
        b.cell(t + 1).cell(static_cast<long>(d)).cell(bs[t].mean[d]).cell(bs[t].cov(d, d)).end();
    return b.str();
  };
  out["filtered.tsv"] = beliefs(filt.filtered);
  out["smoothed.tsv"] = beliefs(smooth);
  Tsv summary({"quantity", "value"});
  summary.cell("loglik").cell(filt.loglik).end();
  out["summary.tsv"] = summary.str();

  if (!c.p.at("tobit_threshold").is_null()) {
    if (p.obs_dim() != 1) throw ConfigError("the tobit demo needs a scalar observation");
    lds::TobitConfig tc;
    tc.threshold = c.p.at("tobit_threshold").get<double>();
    tc.iterations = c.p.at("tobit_iterations").get<int>();
    tc.seed = c.seed_for("tobit");
    lds::Sequence y = x;
    for (auto& v : y) v[0] = std::max(v[0], tc.threshold);
    const auto chain = lds::scan_sampler_dtm(p, y, tc);
    Tsv ch({"iteration", "t", "x_draw"});
    for (std::size_t it = 0; it < chain.draws.size(); ++it)
      for (std::size_t t = 0; t < chain.draws[it].size(); ++t) ch.cell(it).cell(t + 1).cell(chain.draws[it][t][0]).end();
    out["tobit_chain.tsv"] = ch.str();
  }
}

void run_gp(Context& c, Outputs& out) {
  const fs::path path = c.cfg.base_dir / c.p.at("data").get<std::string>();
  const auto lines = lines_of(read_file(path));
  if (lines.size() < 2) throw ConfigError(path.string() + ": need a header and at least one row");
  const std::size_t cols = split_tabs(lines[0]).size();
  if (cols < 2) throw ConfigError(path.string() + ":1: need at least one input column and a target column");
  Matrix X(static_cast<Eigen::Index>(lines.size() - 1), static_cast<Eigen::Index>(cols - 1));
  Vector y(X.rows());
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const auto cells = split_tabs(lines[l]);
    const std::string at = path.string() + ":" + std::to_string(l + 1);
    if (cells.size() != cols) throw ConfigError(at + ": wrong number of fields");
    for (std::size_t j = 0; j < cols; ++j) {
      double v;
      if (!parse_number(cells[j], v)) throw ConfigError(at + ": '" + cells[j] + "' is not numeric");
      if (j + 1 < cols) X(static_cast<Eigen::Index>(l - 1), static_cast<Eigen::Index>(j)) = v;
      else y[static_cast<Eigen::Index>(l - 1)] = v;
    }
  }
  const double ymean = y.mean();
  gp::GpModel m;
  m.x = X;
  m.y = y.array() - ymean;
  m.noise_var = c.p.at("noise_var").get<double>();
  m.jitter = true;
  const bool per_axis = c.p.at("variant").get<std::string>() == "per-axis";
  m.kernel.variant = per_axis ? gp::KernelVariant::PerAxis : gp::KernelVariant::Isotropic;
  m.kernel.log_signal_var = c.p.at("log_signal_var").get<double>();
  m.kernel.log_lengthscales = Vector::Constant(per_axis ? X.cols() : 1, c.p.at("log_lengthscale").get<double>());
  const std::string obj = c.p.at("objective").get<std::string>();
  std::vector<double> trace;
  if (obj != "none") {
    gp::OptimizeOptions oo;
    oo.budget = c.p.at("budget").get<int>();
    oo.optimize_noise = c.p.at("optimize_noise").get<bool>() && m.noise_var > 0.0;
    const auto res = gp::optimize_hyperparams(m, obj == "loo" ? gp::Objective::Loo : gp::Objective::Marginal, oo);
    m = res.model;
    trace = res.trace;
  }
  Tsv hp({"name", "value"});
  hp.cell("log_signal_var").cell(m.kernel.log_signal_var).end();
  for (Eigen::Index d = 0; d < m.kernel.log_lengthscales.size(); ++d)
    hp.cell("log_lengthscale_" + std::to_string(d)).cell(m.kernel.log_lengthscales[d]).end();
  hp.cell("noise_var").cell(m.noise_var).end();
  hp.cell("log_marginal_likelihood").cell(gp::log_marginal_likelihood(m).value).end();
  out["hyperparams.tsv"] = hp.str();
  Tsv tr({"step", "objective"});
  for (std::size_t j = 0; j < trace.size(); ++j) tr.cell(j).cell(trace[j]).end();
  out["trace.tsv"] = tr.str();

  Matrix xs;
  if (X.cols() == 1) {
    const int n = c.p.at("grid_points").get<int>();
    xs = Vector::LinSpaced(n, X.col(0).minCoeff(), X.col(0).maxCoeff());
  } else {
    xs = X;
  }
  const GaussianBelief post = gp::gp_posterior(m, xs);
  std::vector<std::string> header;
  for (Eigen::Index d = 0; d < xs.cols(); ++d) header.push_back("x" + std::to_string(d));
  header.insert(header.end(), {"mean", "var"});
  Tsv pc(header);
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    for (Eigen::Index d = 0; d < xs.cols(); ++d) pc.cell(xs(i, d));
    pc.cell(post.mean[i] + ymean).cell(post.cov(i, i)).end();
  }
  out["posterior.tsv"] = pc.str();
}

struct SequenceSet {
  std::vector<Matrix> data;  // T x D
  std::vector<std::string> names;
  std::vector<std::size_t> subject;
  std::vector<std::string> species;  // per sequence (empty in subjects mode)
};

SequenceSet make_sequences(const core::SeriesPanel& panel, const std::string& mode) {
  SequenceSet s;
  for (std::size_t k = 0; k < panel.num_subjects(); ++k) {
    if (mode == "subjects") {
      s.data.push_back(panel.counts[k].transpose());
      s.names.push_back(panel.subjects[k]);
      s.subject.push_back(k);
      s.species.emplace_back();
      continue;
    }
    for (std::size_t j = 0; j < panel.num_species(); ++j) {
      s.data.push_back(panel.counts[k].row(static_cast<Eigen::Index>(j)).transpose());
      s.names.push_back(panel.subjects[k] + "/" + panel.species[j]);
      s.subject.push_back(k);
      s.species.push_back(panel.species[j]);
    }
  }
  if (s.data.empty()) throw ConfigError("no sequences to fit (empty panel after filtering)");
  return s;
}

void run_hmm_em(Context& c, Outputs& out) {
  const core::SeriesPanel& panel = *c.panel;
  const std::string mode = c.p.at("sequences").get<std::string>();
  const SequenceSet seqs = make_sequences(panel, mode);
  hmm::EmOptions eo;
  eo.max_iter = c.p.at("max_iter").get<int>();
  eo.tol = c.p.at("tol").get<double>();
  const std::string cov = c.p.at("covariance").get<std::string>();
  eo.cov_type = cov == "full" ? hmm::CovarianceType::Full
              : cov == "diagonal" ? hmm::CovarianceType::Diagonal
                                  : hmm::CovarianceType::Auto;
  eo.seed = c.seed_for("em-init");
  eo.threads = c.cfg.threads;
  const int K = c.p.at("K").get<int>();
  const hmm::EmResult res = hmm::em_fit_pooled(seqs.data, K, eo);
  for (const auto& w : res.warnings) c.warnings.push_back(w);

  Tsv gamma({"sequence", "t", "k", "prob"});
  Tsv path({"sequence", "t", "state"});
  std::vector<HeatmapRow> hm;
  for (std::size_t q = 0; q < seqs.data.size(); ++q) {
    const auto& times = panel.times[seqs.subject[q]];
    const auto& g = res.marginals[q].gamma;
    const auto modal = hmm::modal_path(res.marginals[q]);
    for (Eigen::Index t = 0; t < g.rows(); ++t) {
      for (Eigen::Index k = 0; k < g.cols(); ++k)
        gamma.cell(seqs.names[q]).cell(times[static_cast<std::size_t>(t)]).cell(static_cast<long>(k)).cell(g(t, k)).end();
      path.cell(seqs.names[q]).cell(times[static_cast<std::size_t>(t)]).cell(modal[static_cast<std::size_t>(t)]).end();
      if (mode == "species")
        hm.push_back({panel.subjects[seqs.subject[q]], seqs.species[q], times[static_cast<std::size_t>(t)],
                      static_cast<double>(modal[static_cast<std::size_t>(t)])});
    }
  }
  out["gamma.tsv"] = gamma.str();
  out["modal_path.tsv"] = path.str();
  if (!hm.empty()) out["heatmap.tsv"] = heatmap_tsv(hm, "modal_state", panel.subjects, panel.species);
  out["transitions.tsv"] = matrix_tsv(res.params.P, "from", "to_");
  Tsv em({"state", "dim", "pi", "mean", "var"});
  for (int k = 0; k < res.params.num_states(); ++k)
    for (int d = 0; d < res.params.obs_dim(); ++d)
      em.cell(k).cell(d).cell(res.params.pi[k]).cell(res.params.means[static_cast<std::size_t>(k)][d])
          .cell(res.params.covs[static_cast<std::size_t>(k)](d, d)).end();
  out["emissions.tsv"] = em.str();
  Tsv ll({"iteration", "loglik"});
  for (std::size_t j = 0; j < res.loglik_trace.size(); ++j) ll.cell(j).cell(res.loglik_trace[j]).end();
  out["loglik.tsv"] = ll.str();
}

void chain_outputs(const Context& c, const SequenceSet& seqs, const hmm::SamplerChain& chain, Outputs& out) {
  const core::SeriesPanel& panel = *c.panel;
  Tsv ch({"iteration", "sequence", "t", "state"});
  for (const auto& d : chain.draws)
    for (std::size_t q = 0; q < d.z.size(); ++q) {
      const auto& times = panel.times[seqs.subject[q]];
      for (std::size_t t = 0; t < d.z[q].size(); ++t) ch.cell(d.iteration).cell(seqs.names[q]).cell(times[t]).cell(d.z[q][t]).end();
    }
  out["chain.tsv"] = ch.str();
  out["P_mean.tsv"] = matrix_tsv(chain.P_mean, "from", "to_");
  out["P_se.tsv"] = matrix_tsv(chain.P_se, "from", "to_");
  const auto means = hmm::cell_posterior_means(chain);
  const bool multi = !means.empty() && means[0].cols() > 1;
  Tsv mm = multi ? Tsv({"sequence", "t", "species", "mean"}) : Tsv({"sequence", "t", "mean"});
  for (std::size_t q = 0; q < means.size(); ++q) {
    const auto& times = panel.times[seqs.subject[q]];
    for (Eigen::Index t = 0; t < means[q].rows(); ++t)
      for (Eigen::Index d = 0; d < means[q].cols(); ++d) {
        mm.cell(seqs.names[q]).cell(times[static_cast<std::size_t>(t)]);
        if (multi) mm.cell(panel.species[static_cast<std::size_t>(d)]);
        mm.cell(means[q](t, d)).end();
      }
  }
  out["modal_mean.tsv"] = mm.str();
}

hmm::ChainControl chain_control(const Context& c) {
  hmm::ChainControl cc;
  cc.iterations = c.p.at("iterations").get<int>();
  cc.burn_in = c.p.at("burn_in").get<int>();
  cc.thinning = c.p.at("thinning").get<int>();
  cc.seed = c.seed_for("chain");
  cc.threads = c.cfg.threads;
  return cc;
}

void run_sticky(Context& c, Outputs& out) {
  const SequenceSet seqs = make_sequences(*c.panel, c.p.at("sequences").get<std::string>());
  hmm::StickyConfig sc;
  sc.K = c.p.at("K").get<int>();
  sc.alpha = Vector::Constant(sc.K, c.p.at("alpha").get<double>());
  sc.kappa = c.p.at("kappa").get<double>();
  sc.prior = hmm::EmissionPrior::from_data(seqs.data);
  sc.chain = chain_control(c);
  chain_outputs(c, seqs, hmm::sticky_hmm_gibbs(seqs.data, sc), out);
}

void run_hdp(Context& c, Outputs& out) {
  const SequenceSet seqs = make_sequences(*c.panel, c.p.at("sequences").get<std::string>());
  hmm::HdpConfig hc;
  hc.L = c.p.at("L").get<int>();
  hc.gamma = c.p.at("gamma").get<double>();
  hc.alpha = c.p.at("alpha").get<double>();
  hc.kappa = c.p.at("kappa").get<double>();
  hc.textbook_crt = c.p.at("textbook_crt").get<bool>();
  hc.prior = hmm::EmissionPrior::from_data(seqs.data);
  hc.chain = chain_control(c);
  const auto chain = hmm::hdp_hmm_gibbs(seqs.data, hc);
  chain_outputs(c, seqs, chain, out);
  Tsv s({"quantity", "value"});
  s.cell("effective_states").cell(hmm::effective_state_count(chain)).end();
  out["summary.tsv"] = s.str();
}

void run_imgpe(Context& c, Outputs& out) {
  const core::SeriesPanel& panel = *c.panel;
  const std::size_t s = c.subject_index();
  const std::string want = c.p.at("species").get<std::string>();
  if (panel.num_species() == 0) throw ConfigError("no species survive the prevalence filter");
  std::size_t j = 0;
  if (!want.empty()) {
    const auto it = std::find(panel.species.begin(), panel.species.end(), want);
    if (it == panel.species.end()) throw ConfigError("params.species: '" + want + "' not in the filtered panel");
    j = static_cast<std::size_t>(it - panel.species.begin());
  }
  const auto& times = panel.times[s];
  const Vector t = Eigen::Map<const Vector>(times.data(), static_cast<Eigen::Index>(times.size()));
  const Vector y = panel.counts[s].row(static_cast<Eigen::Index>(j)).transpose();
  imgpe::ImgpeOptions io;
  io.alpha = c.p.at("alpha").get<double>();
  io.iterations = c.p.at("iterations").get<int>();
  io.hmc.step_size = c.p.at("step_size").get<double>();
  io.hmc.leapfrog_steps = c.p.at("leapfrog_steps").get<int>();
  io.seed = c.seed_for("chain");
  io.threads = c.cfg.threads;
  const auto chain = imgpe::fit_imgpe(t, y, io);
  const int burn = c.p.at("burn_in").get<int>();
  Tsv as({"iteration", "t", "cluster"});
  for (std::size_t it = 0; it < chain.assignments.size(); ++it)
    for (std::size_t i = 0; i < chain.assignments[it].size(); ++i) as.cell(it).cell(times[i]).cell(chain.assignments[it][i]).end();
  out["assignments.tsv"] = as.str();
  const Matrix co = imgpe::cooccurrence(chain.assignments, burn) / static_cast<double>(io.iterations - burn);
  Tsv ct({"t_i", "t_j", "share"});
  for (Eigen::Index a = 0; a < co.rows(); ++a)
    for (Eigen::Index b = 0; b < co.cols(); ++b) ct.cell(times[static_cast<std::size_t>(a)]).cell(times[static_cast<std::size_t>(b)]).cell(co(a, b)).end();
  out["cooccurrence.tsv"] = ct.str();
  Tsv s2({"quantity", "value"});
  s2.cell("modal_clusters").cell(imgpe::modal_cluster_count(chain, burn)).end();
  s2.cell("hmc_acceptance").cell(chain.hmc_acceptance).end();
  out["summary.tsv"] = s2.str();
}

void run_slds(Context& c, Outputs& out) {
  const core::SeriesPanel& panel = *c.panel;
  const std::size_t s = c.subject_index();
  std::size_t n = panel.num_species();
  const int cap = c.p.at("max_series").get<int>();
  if (cap > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
  if (n == 0) throw ConfigError("no species survive the prevalence filter");
  std::vector<slds::SldsChain> chains(n);
  parallel_for(n, c.cfg.threads, [&](std::size_t j) {
    slds::Sequence y;
    for (Eigen::Index t = 0; t < panel.counts[s].cols(); ++t) y.push_back(Vector::Constant(1, panel.counts[s](static_cast<Eigen::Index>(j), t)));
    slds::SldsOptions so;
    so.K = c.p.at("K").get<int>();
    so.iterations = c.p.at("iterations").get<int>();
    so.burn_in = c.p.at("burn_in").get<int>();
    so.thinning = c.p.at("thinning").get<int>();
    so.seed = c.seed_for("series", j);
    chains[j] = slds::fit_slds(y, slds::SldsPriors::defaults(y), so);
  });
  const auto clus = slds::parameter_sequence_clustering(chains, c.p.at("clip_lower").get<double>(),
                                                        c.p.at("clip_upper").get<double>());
  const auto& times = panel.times[s];
  const std::size_t np = clus.names.size();
  Tsv pt({"species", "t", "param_name", "posterior_mean", "clipped_value"});
  for (std::size_t j = 0; j < n; ++j)
    for (int t = 0; t < clus.T; ++t)
      for (std::size_t q = 0; q < np; ++q) {
        const auto col = static_cast<Eigen::Index>(static_cast<std::size_t>(t) * np + q);
        pt.cell(panel.species[j]).cell(times[static_cast<std::size_t>(t)]).cell(clus.names[q])
            .cell(clus.posterior_means(static_cast<Eigen::Index>(j), col)).cell(clus.clipped(static_cast<Eigen::Index>(j), col)).end();
      }
  out["params.tsv"] = pt.str();
  Tsv ch({"iteration", "sequence", "t", "state"});
  for (std::size_t j = 0; j < n; ++j)
    for (const auto& d : chains[j].draws)
      for (std::size_t t = 0; t < d.z.size(); ++t) ch.cell(d.iteration).cell(panel.species[j]).cell(times[t]).cell(d.z[t]).end();
  out["chain.tsv"] = ch.str();
  Tsv lo({"position", "species"});
  for (std::size_t q = 0; q < clus.tree.leaf_order.size(); ++q) lo.cell(q).cell(panel.species[static_cast<std::size_t>(clus.tree.leaf_order[q])]).end();
  out["leaf_order.tsv"] = lo.str();
}

void run_basic(Context& c, Outputs& out) {
  const core::SeriesPanel& panel = *c.panel;
  const std::size_t s = c.subject_index();
  const Matrix& data = panel.counts[s];
  if (data.rows() == 0) throw ConfigError("no species survive the prevalence filter");
  basic::ObsModel model;
  if (c.p.at("model").get<std::string>() == "bernoulli") {
    if (((data.array() != 0.0) && (data.array() != 1.0)).any())
      throw ConfigError("the bernoulli model needs 0/1 data (use transform 'binarize')");
    model = basic::BetaBernoulli{};
  } else {
    model = basic::default_gaussian(data);
  }
  basic::BasicOptions bo;
  bo.iterations = c.p.at("iterations").get<int>();
  bo.burn_in = c.p.at("burn_in").get<int>();
  bo.eb_rounds = c.p.at("eb_rounds").get<int>();
  bo.eb_model = c.p.at("eb_model").get<bool>();
  bo.jitter_per_sweep = c.p.at("jitter_per_sweep").get<int>();
  bo.seed = c.seed_for("chain");
  bo.threads = c.cfg.threads;
  const auto res = basic::fit_basic(data, model, basic::GridPrior::uniform_grid(c.p.at("grid").get<int>()), bo);
  const auto& times = panel.times[s];
  Tsv fr({"sequence", "t", "frequency"});
  std::vector<HeatmapRow> hm;
  for (Eigen::Index i = 0; i < res.frequency.rows(); ++i)
    for (Eigen::Index t = 0; t < res.frequency.cols(); ++t) {
      fr.cell(panel.species[static_cast<std::size_t>(i)]).cell(times[static_cast<std::size_t>(t)]).cell(res.frequency(i, t)).end();
      hm.push_back({panel.subjects[s], panel.species[static_cast<std::size_t>(i)], times[static_cast<std::size_t>(t)], res.frequency(i, t)});
    }
  out["frequency.tsv"] = fr.str();
  out["heatmap.tsv"] = heatmap_tsv(hm, "changepoint_frequency", panel.subjects, panel.species);
  Tsv pr({"q", "w"});
  for (Eigen::Index k = 0; k < res.prior.q.size(); ++k) pr.cell(res.prior.q[k]).cell(res.prior.w[k]).end();
  out["prior.tsv"] = pr.str();
  Tsv eb({"round", "step", "objective"});
  for (std::size_t r = 0; r < res.eb_traces.size(); ++r)
    for (std::size_t j = 0; j < res.eb_traces[r].size(); ++j) eb.cell(r).cell(j).cell(res.eb_traces[r][j]).end();
  out["eb_trace.tsv"] = eb.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + p.string());
  f << bytes;
  if (!f) throw ConfigError("write failed for " + p.string());
}

}  // namespace

// ---- public --------------------------------------------------------------

IngestResult ingest(const IngestSpec& spec) {
  if (spec.subjects.empty()) throw ConfigError("input.subjects must list at least one subject");
  if (!(spec.prevalence >= 0.0 && spec.prevalence <= 1.0)) throw ConfigError("input.prevalence must be in [0, 1]");
  IngestResult res;
  core::SeriesPanel& panel = res.panel;
  std::vector<CountsFile> files;
  std::map<std::string, std::size_t> index;
  for (const auto& sub : spec.subjects) {
    if (std::find(panel.subjects.begin(), panel.subjects.end(), sub.name) != panel.subjects.end())
      throw ConfigError("duplicate subject '" + sub.name + "'");
    files.push_back(read_counts(sub.counts));
    panel.subjects.push_back(sub.name);
    panel.times.push_back(files.back().times);
    for (const auto& sp : files.back().species)
      if (index.emplace(sp, index.size()).second) panel.species.push_back(sp);
  }
  for (const auto& f : files) {
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(panel.species.size()), static_cast<Eigen::Index>(f.times.size()));
    for (std::size_t r = 0; r < f.species.size(); ++r)
      for (std::size_t t = 0; t < f.times.size(); ++t)
        m(static_cast<Eigen::Index>(index.at(f.species[r])), static_cast<Eigen::Index>(t)) = f.rows[r][t];
    panel.counts.push_back(std::move(m));
  }

  // Prevalence over every sample of every subject.
  const double total = static_cast<double>(panel.total_samples());
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < panel.species.size(); ++j) {
    double positive = 0.0;
    for (const auto& m : panel.counts) positive += static_cast<double>((m.row(static_cast<Eigen::Index>(j)).array() > 0.0).count());
    if (positive >= spec.prevalence * total - 1e-12 * total) keep.push_back(j);
  }
  if (keep.size() != panel.species.size()) {
    std::vector<std::string> names;
    for (std::size_t j : keep) names.push_back(panel.species[j]);
    for (auto& m : panel.counts) {
      Matrix kept(static_cast<Eigen::Index>(keep.size()), m.cols());
      for (std::size_t r = 0; r < keep.size(); ++r) kept.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(keep[r]));
      m = std::move(kept);
    }
    panel.species = std::move(names);
  }

  if (spec.taxonomy) {
    const auto lines = lines_of(read_file(*spec.taxonomy));
    const std::set<std::string> known(panel.species.begin(), panel.species.end());
    std::set<std::string> all_species;
    for (const auto& [sp, _] : index) all_species.insert(sp);
    for (std::size_t l = 0; l < lines.size(); ++l) {
      if (lines[l].empty()) continue;
      const auto cells = split_tabs(lines[l]);
      const std::string at = spec.taxonomy->string() + ":" + std::to_string(l + 1);
      if (cells.size() != 2) throw ConfigError(at + ": expected species and family");
      if (l == 0 && cells[0] == "species") continue;  // optional header
      if (!all_species.count(cells[0])) {
        res.warnings.push_back(at + ": species '" + cells[0] + "' does not appear in any counts file");
        continue;
      }
      if (known.count(cells[0])) panel.taxonomy[cells[0]] = cells[1];
    }
  }
  panel.validate();
  return res;
}

std::string counts_tsv(const core::SeriesPanel& panel, std::size_t subject) {
  std::ostringstream os;
  os << "species";
  for (double t : panel.times.at(subject)) os << '\t' << format_double(t);
  os << '\n';
  const Matrix& m = panel.counts[subject];
  for (Eigen::Index j = 0; j < m.rows(); ++j) {
    os << panel.species[static_cast<std::size_t>(j)];
    for (Eigen::Index t = 0; t < m.cols(); ++t) os << '\t' << format_double(m(j, t));
    os << '\n';
  }
  return os.str();
}

std::string heatmap_tsv(const std::vector<HeatmapRow>& rows, const std::string& kind,
                        const std::vector<std::string>& subject_order, const std::vector<std::string>& species_order) {
  auto rank_of = [](const std::vector<std::string>& order, auto get, const std::vector<HeatmapRow>& rs) {
    std::map<std::string, std::size_t> rank;
    for (const auto& s : order) rank.emplace(s, rank.size());
    for (const auto& r : rs) rank.emplace(get(r), rank.size());
    return rank;
  };
  const auto srank = rank_of(subject_order, [](const HeatmapRow& r) { return r.subject; }, rows);
  const auto prank = rank_of(species_order, [](const HeatmapRow& r) { return r.species; }, rows);
  std::vector<const HeatmapRow*> sorted;
  for (const auto& r : rows) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [&](const HeatmapRow* a, const HeatmapRow* b) {
    const auto ka = std::make_tuple(srank.at(a->subject), prank.at(a->species), a->time);
    const auto kb = std::make_tuple(srank.at(b->subject), prank.at(b->species), b->time);
    return ka < kb;
  });
  std::ostringstream os;
  os << "subject\tspecies\ttime\tvalue\tkind\n";
  for (const auto* r : sorted)
    os << r->subject << '\t' << r->species << '\t' << format_double(r->time) << '\t' << format_double(r->value) << '\t'
       << kind << '\n';
  return os.str();
}

PipelineConfig parse_config(const json& doc, const std::string& method, const fs::path& base_dir) {
  if (std::find(kMethods.begin(), kMethods.end(), method) == kMethods.end())
    throw ConfigError("unknown method '" + method + "'");
  Block top(doc, "config");
  PipelineConfig cfg;
  cfg.base_dir = base_dir;
  cfg.method = method;
  const std::string declared = top.get<std::string>("method", method);
  if (declared != method) throw ConfigError("config declares method '" + declared + "' but the subcommand is '" + method + "'");
  cfg.seed = top.get<std::uint64_t>("seed", 0);
  cfg.threads = top.get<int>("threads", 1);
  require(cfg.threads >= 1, "config.threads must be >= 1");
  cfg.out = base_dir / top.get<std::string>("output", "out");
  if (const auto tr = top.optional<std::string>("transform")) {
    try {
      cfg.transform = core::parse_transform(*tr);
    } catch (const DomainError& e) {
      throw ConfigError(std::string("config.transform: ") + e.what());
    }
  }
  if (const json* in = top.raw("input"); in && !in->is_null()) {
    Block ib(*in, "input");
    IngestSpec spec;
    const json* subs = ib.raw("subjects");
    require(subs && subs->is_array() && !subs->empty(), "input.subjects must be a non-empty array");
    json rec = json::array();
    for (const auto& s : *subs) {
      Block sb(s, "input.subjects[]");
      const auto name = sb.optional<std::string>("name");
      const auto counts = sb.optional<std::string>("counts");
      require(name && !name->empty(), "input.subjects[].name is required");
      require(counts.has_value(), "input.subjects[].counts is required");
      spec.subjects.push_back({*name, base_dir / *counts});
      rec.push_back(sb.finish());
    }
    ib.record("subjects", rec);
    if (const auto tax = ib.optional<std::string>("taxonomy")) spec.taxonomy = base_dir / *tax;
    spec.prevalence = ib.get<double>("prevalence", 0.2);
    require(spec.prevalence >= 0.0 && spec.prevalence <= 1.0, "input.prevalence must be in [0, 1]");
    top.record("input", ib.finish());
    cfg.input = spec;
  } else {
    top.record("input", nullptr);
  }
  if (needs_panel(method) && !cfg.input) throw ConfigError("method '" + method + "' needs an input block");
  const json empty = json::object();
  const json* params = top.raw("params");
  cfg.params = method_params(method, params && !params->is_null() ? *params : empty);
  top.record("params", cfg.params);
  cfg.resolved = top.finish();
  return cfg;
}

PipelineConfig load_config(const fs::path& path, const std::string& method, const Overrides& ov) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw ConfigError(path.string() + ": top level must be a JSON object");
  if (ov.seed) doc["seed"] = *ov.seed;
  if (ov.threads) doc["threads"] = *ov.threads;
  PipelineConfig cfg = parse_config(doc, method, fs::absolute(path).parent_path());
  if (ov.out) {
    cfg.out = fs::absolute(*ov.out);
    cfg.resolved["output"] = cfg.out.string();
  }
  return cfg;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw NumericalError("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

RunManifest run(const PipelineConfig& cfg) {
  using clock = std::chrono::steady_clock;
  auto seconds = [](clock::time_point a) { return std::chrono::duration<double>(clock::now() - a).count(); };
  RunManifest man;
  man.seed = cfg.seed;
  // Threads only change scheduling, so they stay out of the hash.
  json hashed = cfg.resolved;
  hashed.erase("threads");
  hashed.erase("output");
  man.config_hash = sha256_hex(hashed.dump());

  Outputs out;
  Context ctx{cfg, cfg.params, std::nullopt, std::nullopt, {}};
  auto t0 = clock::now();
  if (cfg.input) {
    IngestResult ing = ingest(*cfg.input);
    ctx.warnings = ing.warnings;
    for (std::size_t s = 0; s < ing.panel.num_subjects(); ++s)
      out["panel_" + ing.panel.subjects[s] + ".tsv"] = counts_tsv(ing.panel, s);
    ctx.panel = cfg.transform ? core::apply_transform(ing.panel, *cfg.transform) : ing.panel;
    ctx.raw = std::move(ing.panel);
  }
  man.timings["ingest"] = seconds(t0);

  t0 = clock::now();
  const std::string& m = cfg.method;
  if (m == "hclust") run_hclust(ctx, out);
  else if (m == "cart") run_cart(ctx, out);
  else if (m == "lds-demo") run_lds_demo(ctx, out);
  else if (m == "gp") run_gp(ctx, out);
  else if (m == "hmm-em") run_hmm_em(ctx, out);
  else if (m == "hmm-sticky") run_sticky(ctx, out);
  else if (m == "hdp-hmm") run_hdp(ctx, out);
  else if (m == "imgpe") run_imgpe(ctx, out);
  else if (m == "slds") run_slds(ctx, out);
  else if (m == "basic") run_basic(ctx, out);
  man.timings["method"] = seconds(t0);

  t0 = clock::now();
  fs::create_directories(cfg.out.parent_path().empty() ? fs::path(".") : cfg.out.parent_path());
  std::random_device rd;
  const fs::path stage = cfg.out.parent_path() / (".stage-" + cfg.out.filename().string() + "-" + std::to_string(rd()));
  try {
    fs::create_directories(stage);
    for (const auto& [name, bytes] : out) {
      write_file(stage / name, bytes);
      man.checksums[name] = sha256_hex(bytes);
    }
    man.timings["write"] = seconds(t0);
    json mj;
    mj["method"] = cfg.method;
    mj["config_hash"] = man.config_hash;
    mj["seed"] = man.seed;
    mj["config"] = cfg.resolved;
    mj["versions"] = {{"regime", kVersion},
                      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)},
                      {"boost", BOOST_LIB_VERSION},
                      {"openssl", OPENSSL_VERSION_TEXT}};
    mj["outputs"] = man.checksums;
    mj["timings"] = man.timings;
    mj["warnings"] = ctx.warnings;
    write_file(stage / "manifest.json", mj.dump(2) + "\n");

    fs::create_directories(cfg.out);
    fs::remove(cfg.out / "manifest.json");
    for (const auto& [name, _] : out) fs::rename(stage / name, cfg.out / name);
    fs::rename(stage / "manifest.json", cfg.out / "manifest.json");
    fs::remove_all(stage);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(stage, ec);
    throw;
  }
  return man;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return 3;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DomainError*>(&e) ||
      dynamic_cast<const LengthError*>(&e) || dynamic_cast<const RangeError*>(&e) ||
      dynamic_cast<const json::exception*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e))
    return 2;
  return 1;
}

}  // namespace regime::cli
