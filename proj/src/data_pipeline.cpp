#include "dyns/data_pipeline.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace dyns {

std::string to_string(Label label) { return label == Label::kASD ? "ASD" : "TC"; }

Label parse_label(const std::string& name) {
  if (name == "ASD") return Label::kASD;
  if (name == "TC") return Label::kTC;
  throw ParseError("unknown label '" + name + "' (expected ASD or TC)");
}

// ---------------------------------------------------------------- CSV

namespace {

constexpr Index kMinRois = 2;
constexpr Index kMinSteps = 3;

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

RoiTimeSeries load_roi_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  const std::string where = path.string();

  std::string line;
  if (!std::getline(in, line)) throw ContentError(where + ": empty file");
  const auto header = split_fields(trim(line));
  const auto rois = static_cast<Index>(header.size());
  for (Index i = 0; i < rois; ++i) {
    if (trim(header[static_cast<std::size_t>(i)]) != "roi_" + std::to_string(i))
      throw ParseError(where + ":1: expected header field roi_" + std::to_string(i) + ", got '" +
                       std::string(header[static_cast<std::size_t>(i)]) + "'");
  }

  std::vector<double> values;
  Index steps = 0;
  Index line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto fields = split_fields(body);
    if (static_cast<Index>(fields.size()) != rois)
      throw ParseError(where + ":" + std::to_string(line_no) + ": expected " + std::to_string(rois) + " fields, got " +
                       std::to_string(fields.size()));
    for (const auto& raw : fields) {
      const auto f = trim(raw);
      double v = 0;
      const char* first = f.data();
      if (!f.empty() && *first == '+') ++first;
      const auto res = std::from_chars(first, f.data() + f.size(), v);
      if (f.empty() || res.ec != std::errc{} || res.ptr != f.data() + f.size() || !std::isfinite(v))
        throw ParseError(where + ":" + std::to_string(line_no) + ": non-numeric field '" + std::string(f) + "'");
      values.push_back(v);
    }
    ++steps;
  }
  if (rois < kMinRois) throw ContentError(where + ": need at least 2 ROIs, got " + std::to_string(rois));
  if (steps < kMinSteps)
    throw ContentError(where + ": need at least " + std::to_string(kMinSteps) + " time points, got " +
                       std::to_string(steps));

  Vec<Real> data(static_cast<Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) data[static_cast<Index>(i)] = static_cast<Real>(values[i]);
  RoiTimeSeries ts;
  ts.subject_id = path.stem().string();
  ts.values = Tensor({steps, rois}, std::move(data));
  return ts;
}

void write_roi_csv(const std::filesystem::path& path, const Tensor& values) {
  if (values.rank() != 2) throw DimensionError("write_roi_csv expects [T, N], got " + shape_to_string(values.shape()));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  const Index rows = values.dim(0), cols = values.dim(1);
  for (Index j = 0; j < cols; ++j) out << (j ? "," : "") << "roi_" << j;
  out << '\n';
  const auto m = values.matrix();
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) out << (j ? "," : "") << format_real(static_cast<double>(m(i, j)));
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

// ---------------------------------------------------------------- normalization

RoiTimeSeries normalize_zscore(const RoiTimeSeries& ts) {
  const Index steps = ts.values.dim(0);
  if (steps < 2) throw ContentError("normalize_zscore needs T >= 2, got " + std::to_string(steps));
  RowMat<Real> m = ts.values.matrix();
  for (Index c = 0; c < m.cols(); ++c) {
    auto col = m.col(c);
    const Real mu = col.mean();
    col.array() -= mu;
    const Real sd = std::sqrt(col.squaredNorm() / static_cast<Real>(steps));
    const Real tiny = Real(1e-12) * std::max(Real(1), std::abs(mu));
    if (sd <= tiny)
      col.setZero();
    else
      col /= sd;
  }
  RoiTimeSeries out = ts;
  out.values = Tensor::from_matrix(m);
  return out;
}

// ---------------------------------------------------------------- synthetic data

std::vector<std::vector<Eigen::MatrixXd>> planted_templates(Index rois, Index regimes, double separation) {
  if (rois < 2 || regimes < 1) throw SpecError("planted_templates: need rois >= 2 and regimes >= 1");
  const Index blocks = 2 * regimes;
  const Index block = std::max<Index>(2, rois / blocks);
  std::vector<std::vector<Eigen::MatrixXd>> out(2);
  for (Index c = 0; c < 2; ++c) {
    for (Index r = 0; r < regimes; ++r) {
      Eigen::MatrixXd t = Eigen::MatrixXd::Identity(rois, rois);
      const Index start = ((c * regimes + r) * block) % rois;
      for (Index i = 0; i < block; ++i)
        for (Index j = 0; j < block; ++j)
          if (i != j) t((start + i) % rois, (start + j) % rois) = separation;
      out[static_cast<std::size_t>(c)].push_back(t);
    }
  }
  return out;
}

std::vector<std::vector<Eigen::MatrixXd>> null_templates(Index rois, Index regimes, double separation) {
  auto planted = planted_templates(rois, regimes, separation);
  planted[1] = planted[0];
  return planted;
}

SynthSpec default_synth_spec(std::uint64_t seed, double separation) {
  SynthSpec spec;
  spec.seed = seed;
  spec.state_graphs = planted_templates(spec.rois, 2, separation);
  return spec;
}

void validate(const SynthSpec& spec) {
  if (spec.rois < 2) throw SpecError("synth spec: need at least 2 ROIs");
  if (spec.steps < kMinSteps) throw SpecError("synth spec: need at least 3 time points");
  if (spec.subjects_per_class < 2) throw SpecError("synth spec: need at least 2 subjects per class");
  if (spec.switch_rate < 0) throw SpecError("synth spec: switch_rate must be >= 0");
  if (spec.noise_std < 0) throw SpecError("synth spec: noise_std must be >= 0");
  if (std::abs(spec.temporal_smoothness) >= 1) throw SpecError("synth spec: temporal_smoothness must be in (-1, 1)");
  if (spec.state_graphs.size() != 2) throw SpecError("synth spec: need templates for exactly 2 classes");
  for (const auto& cls : spec.state_graphs) {
    if (cls.empty()) throw SpecError("synth spec: every class needs at least one template");
    for (const auto& t : cls) {
      if (t.rows() != spec.rois || t.cols() != spec.rois) throw SpecError("synth spec: template size mismatch");
      if ((t - t.transpose()).cwiseAbs().maxCoeff() > 0)
        throw SpecError("synth spec: templates must be symmetric");
      if ((t.diagonal().array() - 1.0).abs().maxCoeff() > 1e-12)
        throw SpecError("synth spec: templates must have unit diagonal");
    }
  }
  if (!spec.allow_identical_classes) {
    const auto& a = spec.state_graphs[0];
    const auto& b = spec.state_graphs[1];
    bool identical = a.size() == b.size();
    for (std::size_t i = 0; identical && i < a.size(); ++i) identical = (a[i] - b[i]).norm() == 0.0;
    if (identical)
      throw SpecError("synth spec: class templates are identical (set allow_identical_classes for a null dataset)");
  }
}

Eigen::MatrixXd nearest_pd_correlation(const Eigen::MatrixXd& m, double floor) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(floor);
  Eigen::MatrixXd pd = eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
  Eigen::VectorXd d = pd.diagonal().cwiseSqrt().cwiseInverse();
  pd = d.asDiagonal() * pd * d.asDiagonal();
  return 0.5 * (pd + pd.transpose());
}

std::vector<RoiTimeSeries> synth_generate(const SynthSpec& spec) {
  validate(spec);
  // Cholesky factors per (class, regime).
  std::vector<std::vector<Eigen::MatrixXd>> factors(2);
  for (std::size_t c = 0; c < 2; ++c)
    for (const auto& t : spec.state_graphs[c]) {
      Eigen::LLT<Eigen::MatrixXd> llt(t);
      if (llt.info() != Eigen::Success) llt.compute(nearest_pd_correlation(t));
      if (llt.info() != Eigen::Success) throw SpecError("template is not positive definite after projection");
      factors[c].push_back(llt.matrixL());
    }

  const Index n = spec.rois, steps = spec.steps;
  const double phi = spec.temporal_smoothness;
  const double innovation = std::sqrt(1.0 - phi * phi);
  const double p_switch = std::min(1.0, spec.switch_rate / static_cast<double>(steps));

  std::vector<RoiTimeSeries> out;
  out.reserve(static_cast<std::size_t>(2 * spec.subjects_per_class));
  for (std::size_t c = 0; c < 2; ++c) {
    const auto regimes = static_cast<std::uint64_t>(factors[c].size());
    for (Index s = 0; s < spec.subjects_per_class; ++s) {
      const auto index = static_cast<std::uint64_t>(c) * static_cast<std::uint64_t>(spec.subjects_per_class) +
                         static_cast<std::uint64_t>(s);
      CounterRng rng(spec.seed, index + 1);
      Eigen::VectorXd z(n), eps(n);
      for (Index i = 0; i < n; ++i) z[i] = rng.normal();
      auto regime = rng.below(regimes);
      RowMat<Real> values(steps, n);
      for (Index t = 0; t < steps; ++t) {
        if (t > 0) {
          if (regimes > 1 && rng.uniform() < p_switch) regime = (regime + 1 + rng.below(regimes - 1)) % regimes;
          for (Index i = 0; i < n; ++i) eps[i] = rng.normal();
          z = phi * z + innovation * eps;
        }
        Eigen::VectorXd x = factors[c][regime] * z;
        for (Index i = 0; i < n; ++i) x[i] += spec.noise_std * rng.normal();
        values.row(t) = x.cast<Real>().transpose();
      }
      char id[32];
      std::snprintf(id, sizeof(id), "sub_%04llu", static_cast<unsigned long long>(index));
      out.push_back({id, Tensor::from_matrix(values), c == 0 ? Label::kASD : Label::kTC});
    }
  }
  return out;
}

// ---------------------------------------------------------------- split

DatasetSplit split_dataset(const std::vector<RoiTimeSeries>& subjects, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw SplitError("train_fraction must lie in (0, 1), got " + std::to_string(train_fraction));
  std::vector<std::vector<std::size_t>> by_class(2);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (!subjects[i].label) throw SplitError("subject " + subjects[i].subject_id + " has no label");
    by_class[static_cast<std::size_t>(*subjects[i].label)].push_back(i);
  }
  DatasetSplit split;
  split.seed = seed;
  for (std::size_t c = 0; c < 2; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < 2)
      throw SplitError("class " + to_string(static_cast<Label>(c)) + " has " + std::to_string(idx.size()) +
                       " subjects; need at least 2");
    CounterRng rng(seed, c + 1);
    shuffle_in_place(idx, rng);
    const auto count = static_cast<double>(idx.size());
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * count));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_train ? split.train : split.test).push_back(subjects[idx[k]]);
  }
  CounterRng order(seed, 3);
  shuffle_in_place(split.train, order);
  shuffle_in_place(split.test, order);
  return split;
}

// ---------------------------------------------------------------- dataset directory

void write_dataset(const std::filesystem::path& dir, const std::vector<RoiTimeSeries>& subjects) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& s : subjects) {
    const std::string file = s.subject_id + ".csv";
    write_roi_csv(dir / file, s.values);
    nlohmann::json entry;
    entry["subject_id"] = s.subject_id;
    entry["label"] = s.label ? nlohmann::json(to_string(*s.label)) : nlohmann::json(nullptr);
    entry["path"] = file;
    manifest.push_back(entry);
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ParseError("cannot open manifest " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest " + manifest.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw ParseError("manifest " + manifest.string() + " must be a JSON array");
  std::vector<ManifestEntry> out;
  for (const auto& e : doc) {
    try {
      ManifestEntry entry;
      entry.subject_id = e.at("subject_id").get<std::string>();
      entry.path = e.at("path").get<std::string>();
      if (e.contains("label") && !e.at("label").is_null()) entry.label = parse_label(e.at("label").get<std::string>());
      out.push_back(std::move(entry));
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("manifest " + manifest.string() + ": " + ex.what());
    }
  }
  return out;
}

std::vector<RoiTimeSeries> load_dataset(const std::filesystem::path& manifest) {
  const auto base = manifest.parent_path();
  std::vector<RoiTimeSeries> out;
  for (const auto& entry : read_manifest(manifest)) {
    auto ts = load_roi_csv(base / entry.path);
    ts.subject_id = entry.subject_id;
    ts.label = entry.label;
    out.push_back(std::move(ts));
  }
  return out;
}

// ---------------------------------------------------------------- static probe

Eigen::VectorXd static_correlation_features(const Tensor& values) {
  Eigen::MatrixXd m = values.matrix().cast<double>();
  m.rowwise() -= m.colwise().mean();
  Eigen::VectorXd sd = (m.colwise().squaredNorm() / static_cast<double>(m.rows())).cwiseSqrt().transpose();
  const Index n = m.cols();
  Eigen::MatrixXd cov = (m.transpose() * m) / static_cast<double>(m.rows());
  Eigen::VectorXd features(n * (n - 1) / 2);
  Index k = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      const double denom = sd[i] * sd[j];
      features[k++] = denom > 0 ? cov(i, j) / denom : 0.0;
    }
  return features;
}

double linear_probe_accuracy(const DatasetSplit& split) {
  if (split.train.empty() || split.test.empty()) throw EvaluationError("linear probe needs non-empty train and test sets");
  std::vector<Eigen::VectorXd> centroid(2);
  std::vector<double> count(2, 0.0);
  for (const auto& s : split.train) {
    const auto c = static_cast<std::size_t>(*s.label);
    const Eigen::VectorXd f = static_correlation_features(s.values);
    if (count[c] == 0) centroid[c] = Eigen::VectorXd::Zero(f.size());
    centroid[c] += f;
    count[c] += 1;
  }
  if (count[0] == 0 || count[1] == 0) throw EvaluationError("linear probe needs both classes in train");
  centroid[0] /= count[0];
  centroid[1] /= count[1];
  // Nearest centroid is the linear rule w.f > b with w = c0 - c1.
  std::size_t correct = 0;
  for (const auto& s : split.test) {
    const Eigen::VectorXd f = static_correlation_features(s.values);
    const std::size_t pred = (f - centroid[0]).squaredNorm() <= (f - centroid[1]).squaredNorm() ? 0 : 1;
    if (s.label && pred == static_cast<std::size_t>(*s.label)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.test.size());
}

}  // namespace dyns
