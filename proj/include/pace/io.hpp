#pragma once

// On-disk formats.
//
// Array file: 8-byte magic "PACEARR\0", u32 LE rank, rank x u64 LE dims, then
// the row-major payload (float64 LE, or int64 LE for label/index arrays).
//
// Dataset directory: manifest.json plus one array file per field.
// Model file: 8-byte magic "PACEMDL\0", u64 LE header length, UTF-8 JSON
// header, then framed arrays means[K,d], covs[K,d,d], alpha[K], eta[N,K], beta[K].

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "pace/errors.hpp"
#include "pace/model.hpp"
#include "pace/synthetic.hpp"

namespace pace::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::array<char, 8> kArrayMagic{'P', 'A', 'C', 'E', 'A', 'R', 'R', '\0'};
inline constexpr std::array<char, 8> kModelMagic{'P', 'A', 'C', 'E', 'M', 'D', 'L', '\0'};
inline constexpr int kFormatVersion = 1;

template <typename T>
struct Array {
  std::vector<std::uint64_t> dims;
  std::vector<T> values;

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), sizeof(T));
}

template <typename T>
bool get_le(std::istream& in, T& value) {
  std::array<char, sizeof(T)> bytes;
  if (!in.read(bytes.data(), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  std::memcpy(&value, bytes.data(), sizeof(T));
  return true;
}

}  // namespace detail

template <typename T>
void write_array(std::ostream& out, std::span<const std::uint64_t> dims, std::span<const T> values) {
  static_assert(std::is_same_v<T, double> || std::is_same_v<T, std::int64_t>);
  out.write(kArrayMagic.data(), kArrayMagic.size());
  detail::put_le(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) detail::put_le(out, d);
  for (const T& v : values) detail::put_le(out, v);
}

/// `name` labels errors; it is the file the stream came from.
template <typename T>
Array<T> read_array(std::istream& in, const std::string& name) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size())) throw FormatError(name, "truncated array header");
  if (magic != kArrayMagic) throw FormatError(name, "bad array magic");
  std::uint32_t rank = 0;
  if (!detail::get_le(in, rank)) throw FormatError(name, "truncated array header");
  if (rank > 16) throw FormatError(name, "implausible array rank " + std::to_string(rank));
  Array<T> arr;
  arr.dims.resize(rank);
  for (auto& d : arr.dims) {
    if (!detail::get_le(in, d)) throw FormatError(name, "truncated array dims");
  }
  const auto n = arr.count();
  if (n > (std::uint64_t{1} << 36)) throw FormatError(name, "implausible array size");
  arr.values.resize(static_cast<std::size_t>(n));
  for (auto& v : arr.values) {
    if (!detail::get_le(in, v)) throw FormatError(name, "truncated array payload");
  }
  return arr;
}

template <typename T>
void write_array_file(const fs::path& path, std::span<const std::uint64_t> dims, std::span<const T> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string(), "cannot open for writing");
  write_array<T>(out, dims, values);
  if (!out) throw FormatError(path.string(), "write failed");
}

template <typename T>
Array<T> read_array_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), "cannot open for reading");
  auto arr = read_array<T>(in, path.string());
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string(), "trailing bytes after payload");
  return arr;
}

template <typename T>
void expect_dims(const Array<T>& arr, const std::vector<std::uint64_t>& dims, const std::string& name) {
  if (arr.dims != dims) {
    std::string want, got;
    for (auto d : dims) want += std::to_string(d) + " ";
    for (auto d : arr.dims) got += std::to_string(d) + " ";
    throw FormatError(name, "shape mismatch: expected [ " + want + "] got [ " + got + "]");
  }
}

// ---------------------------------------------------------------------------
// Flattening helpers
// ---------------------------------------------------------------------------

inline std::vector<double> flatten(const RowMatrix& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

inline RowMatrix unflatten(std::span<const double> values, Eigen::Index rows, Eigen::Index cols) {
  RowMatrix m(rows, cols);
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

inline void write_matrix(std::ostream& out, const RowMatrix& m) {
  const std::array<std::uint64_t, 2> dims{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  write_array<double>(out, dims, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
}

inline void write_vector(std::ostream& out, const Vector& v) {
  const std::array<std::uint64_t, 1> dims{static_cast<std::uint64_t>(v.size())};
  write_array<double>(out, dims, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

inline void write_stacked(std::ostream& out, const std::vector<Matrix>& ms) {
  const auto k = static_cast<std::uint64_t>(ms.size());
  const auto r = ms.empty() ? 0 : static_cast<std::uint64_t>(ms.front().rows());
  const auto c = ms.empty() ? 0 : static_cast<std::uint64_t>(ms.front().cols());
  std::vector<double> flat;
  flat.reserve(k * r * c);
  for (const auto& m : ms) {
    const RowMatrix rm = m;
    flat.insert(flat.end(), rm.data(), rm.data() + rm.size());
  }
  const std::array<std::uint64_t, 3> dims{k, r, c};
  write_array<double>(out, dims, flat);
}

// ---------------------------------------------------------------------------
// TrainConfig echo
// ---------------------------------------------------------------------------

inline json config_to_json(const TrainConfig& c) {
  return json{{"K", c.num_concepts},
              {"epochs", c.epochs},
              {"attention", std::string(to_string(c.attention))},
              {"head_learning_rate", c.head_learning_rate},
              {"negatives_per_image", c.negatives_per_image},
              {"inference_max_iters", c.inference_max_iters},
              {"inference_rel_tol", c.inference_rel_tol},
              {"constraint_mode", c.constraint_mode},
              {"rng_seed", c.rng_seed},
              {"sweeps_per_epoch", c.sweeps_per_epoch},
              {"train_heads", c.train_heads},
              {"heads_in_inference", c.heads_in_inference},
              {"twins_in_mstep", c.twins_in_mstep},
              {"covariance", c.covariance == CovarianceKind::kFull ? "full" : "diagonal"},
              {"init_subsample", c.init_subsample},
              {"lloyd_iters", c.lloyd_iters}};
}

inline TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.num_concepts = j.at("K").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.attention = parse_attention_rescale(j.at("attention").get<std::string>());
  c.head_learning_rate = j.at("head_learning_rate").get<double>();
  c.negatives_per_image = j.at("negatives_per_image").get<std::size_t>();
  c.inference_max_iters = j.at("inference_max_iters").get<std::size_t>();
  c.inference_rel_tol = j.at("inference_rel_tol").get<double>();
  c.constraint_mode = j.at("constraint_mode").get<bool>();
  c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  c.sweeps_per_epoch = j.value("sweeps_per_epoch", std::size_t{1});
  c.train_heads = j.value("train_heads", true);
  c.heads_in_inference = j.value("heads_in_inference", true);
  c.twins_in_mstep = j.value("twins_in_mstep", false);
  c.covariance = j.value("covariance", std::string("full")) == "diagonal" ? CovarianceKind::kDiagonal
                                                                           : CovarianceKind::kFull;
  c.init_subsample = j.value("init_subsample", std::size_t{10000});
  c.lloyd_iters = j.value("lloyd_iters", std::size_t{10});
  return c;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string(), "cannot open for reading");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

inline void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(path.string(), "cannot open for writing");
  out << j.dump(2) << '\n';
  if (!out) throw FormatError(path.string(), "write failed");
}

inline void save_dataset(const Dataset& data, const fs::path& dir) {
  data.validate();
  bool any_twin = false;
  for (const auto& r : data.records) any_twin = any_twin || r.perturbed.has_value();
  const bool twins = data.has_perturbed();
  if (any_twin && !twins) throw ContractError("save_dataset: either every record or none must have a twin");
  fs::create_directories(dir);

  const auto M = static_cast<std::uint64_t>(data.size());
  const auto J = static_cast<std::uint64_t>(data.patches_per_image());
  const auto d = static_cast<std::uint64_t>(data.dim());
  for (const auto& r : data.records) {
    if (static_cast<std::uint64_t>(r.patches.num_patches()) != J) {
      throw ContractError("save_dataset: every image must have the same number of patches");
    }
  }

  auto dump_patches = [&](auto get, const std::string& emb_name, const std::string& att_name) {
    std::vector<double> emb, att;
    emb.reserve(M * J * d);
    att.reserve(M * J);
    for (const auto& r : data.records) {
      const Patches& p = get(r);
      emb.insert(emb.end(), p.embeddings.data(), p.embeddings.data() + p.embeddings.size());
      att.insert(att.end(), p.attentions.data(), p.attentions.data() + p.attentions.size());
    }
    const std::array<std::uint64_t, 3> edims{M, J, d};
    const std::array<std::uint64_t, 2> adims{M, J};
    write_array_file<double>(dir / emb_name, edims, emb);
    write_array_file<double>(dir / att_name, adims, att);
  };
  dump_patches([](const ImageRecord& r) -> const Patches& { return r.patches; }, "embeddings.bin", "attentions.bin");
  if (twins) {
    dump_patches([](const ImageRecord& r) -> const Patches& { return *r.perturbed; },
                 "perturbed_embeddings.bin", "perturbed_attentions.bin");
  }
  std::vector<std::int64_t> labels;
  for (const auto& r : data.records) labels.push_back(r.predicted_label);
  const std::array<std::uint64_t, 1> ldims{M};
  write_array_file<std::int64_t>(dir / "labels.bin", ldims, labels);

  json manifest;
  manifest["version"] = kFormatVersion;
  manifest["d"] = d;
  manifest["J"] = J;
  manifest["N"] = data.num_classes;
  manifest["M"] = M;
  json ids = json::array(), split = json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    ids.push_back(data.records[i].id);
    split.push_back(std::string(to_string(data.splits[i])));
  }
  manifest["ids"] = ids;
  manifest["split"] = split;
  manifest["has_perturbed"] = twins;
  json files{{"embeddings", "embeddings.bin"}, {"attentions", "attentions.bin"}, {"labels", "labels.bin"}};
  if (twins) {
    files["perturbed_embeddings"] = "perturbed_embeddings.bin";
    files["perturbed_attentions"] = "perturbed_attentions.bin";
  }
  manifest["files"] = files;
  write_json_file(dir / "manifest.json", manifest);
}

inline Dataset load_dataset(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  const json manifest = read_json_file(manifest_path);
  const std::string mname = manifest_path.string();
  std::uint64_t M = 0, J = 0, d = 0, N = 0;
  bool twins = false;
  std::vector<std::string> ids, split;
  json files;
  try {
    if (manifest.at("version").get<int>() != kFormatVersion) throw FormatError(mname, "unsupported version");
    M = manifest.at("M").get<std::uint64_t>();
    J = manifest.at("J").get<std::uint64_t>();
    d = manifest.at("d").get<std::uint64_t>();
    N = manifest.at("N").get<std::uint64_t>();
    twins = manifest.at("has_perturbed").get<bool>();
    ids = manifest.at("ids").get<std::vector<std::string>>();
    split = manifest.at("split").get<std::vector<std::string>>();
    files = manifest.at("files");
  } catch (const json::exception& e) {
    throw FormatError(mname, std::string("missing or mistyped key: ") + e.what());
  }
  if (ids.size() != M || split.size() != M) throw FormatError(mname, "ids/split length disagrees with M");
  if (M == 0 || J == 0 || d == 0 || N == 0) throw FormatError(mname, "M, J, d and N must be positive");

  auto file_of = [&](const char* key) {
    if (!files.contains(key) || !files[key].is_string()) throw FormatError(mname, std::string("missing file entry ") + key);
    return dir / files[key].get<std::string>();
  };
  auto load_f64 = [&](const char* key, const std::vector<std::uint64_t>& dims) {
    const auto path = file_of(key);
    auto arr = read_array_file<double>(path);
    expect_dims(arr, dims, path.string());
    return arr;
  };

  const auto emb = load_f64("embeddings", {M, J, d});
  const auto att = load_f64("attentions", {M, J});
  const auto labels_path = file_of("labels");
  const auto labels = read_array_file<std::int64_t>(labels_path);
  expect_dims(labels, {M}, labels_path.string());
  Array<double> pemb, patt;
  if (twins) {
    pemb = load_f64("perturbed_embeddings", {M, J, d});
    patt = load_f64("perturbed_attentions", {M, J});
  }

  Dataset data;
  data.num_classes = static_cast<std::size_t>(N);
  const auto Ji = static_cast<Eigen::Index>(J);
  const auto di = static_cast<Eigen::Index>(d);
  auto patches_at = [&](const Array<double>& e, const Array<double>& a, std::uint64_t m) {
    Patches p;
    p.embeddings = unflatten(std::span<const double>(e.values).subspan(m * J * d, J * d), Ji, di);
    p.attentions = Eigen::Map<const Vector>(a.values.data() + m * J, Ji);
    return p;
  };
  for (std::uint64_t m = 0; m < M; ++m) {
    ImageRecord rec;
    rec.id = ids[m];
    rec.patches = patches_at(emb, att, m);
    const auto y = labels.values[m];
    if (y < 0 || static_cast<std::uint64_t>(y) >= N) {
      throw FormatError(labels_path.string(), "label " + std::to_string(y) + " outside [0, N)");
    }
    rec.predicted_label = static_cast<int>(y);
    if (twins) rec.perturbed = patches_at(pemb, patt, m);
    data.records.push_back(std::move(rec));
    if (split[m] == "train") {
      data.splits.push_back(Split::kTrain);
    } else if (split[m] == "test") {
      data.splits.push_back(Split::kTest);
    } else {
      throw FormatError(mname, "unknown split '" + split[m] + "'");
    }
  }
  try {
    data.validate();
  } catch (const Error& e) {
    throw FormatError(dir.string(), e.what());
  }
  return data;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Model {
  ConceptBank bank;
  HeadParams head;
  TrainConfig config;
};

inline void save_model(const ConceptBank& bank, const HeadParams& head, const TrainConfig& config,
                       const fs::path& path) {
  bank.validate();
  if (head.num_concepts() != bank.num_concepts()) throw ShapeError("save_model: head K mismatch");
  json header{{"version", kFormatVersion},
              {"K", bank.num_concepts()},
              {"d", bank.dim()},
              {"N", head.num_classes()},
              {"config", config_to_json(config)}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path.string(), "cannot open for writing");
  out.write(kModelMagic.data(), kModelMagic.size());
  detail::put_le(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  RowMatrix means(static_cast<Eigen::Index>(bank.num_concepts()), bank.dim());
  for (std::size_t k = 0; k < bank.num_concepts(); ++k) means.row(static_cast<Eigen::Index>(k)) = bank.means[k].transpose();
  write_matrix(out, means);
  std::vector<Matrix> covs;
  for (const auto& c : bank.covs) covs.push_back(c.matrix());
  write_stacked(out, covs);
  write_vector(out, bank.alpha);
  write_matrix(out, head.eta);
  write_vector(out, head.beta);
  if (!out) throw FormatError(path.string(), "write failed");
}

inline Model load_model(const fs::path& path) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(name, "cannot open for reading");
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kModelMagic) throw FormatError(name, "bad model magic");
  std::uint64_t header_len = 0;
  if (!detail::get_le(in, header_len) || header_len > (1u << 24)) throw FormatError(name, "bad header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw FormatError(name, "truncated header");

  Model model;
  std::uint64_t K = 0, d = 0, N = 0;
  try {
    const json header = json::parse(text);
    if (header.at("version").get<int>() != kFormatVersion) throw FormatError(name, "unsupported version");
    K = header.at("K").get<std::uint64_t>();
    d = header.at("d").get<std::uint64_t>();
    N = header.at("N").get<std::uint64_t>();
    model.config = config_from_json(header.at("config"));
  } catch (const json::exception& e) {
    throw FormatError(name, std::string("bad header: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(name, e.what());
  }
  if (K == 0 || d == 0) throw FormatError(name, "K and d must be positive");

  const auto means = read_array<double>(in, name);
  expect_dims(means, {K, d}, name + " (means)");
  const auto covs = read_array<double>(in, name);
  expect_dims(covs, {K, d, d}, name + " (covariances)");
  const auto alpha = read_array<double>(in, name);
  expect_dims(alpha, {K}, name + " (alpha)");
  const auto eta = read_array<double>(in, name);
  expect_dims(eta, {N, K}, name + " (eta)");
  const auto beta = read_array<double>(in, name);
  expect_dims(beta, {K}, name + " (beta)");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(name, "trailing bytes after model");

  const auto Ki = static_cast<Eigen::Index>(K);
  const auto di = static_cast<Eigen::Index>(d);
  for (std::uint64_t k = 0; k < K; ++k) {
    model.bank.means.push_back(Eigen::Map<const Vector>(means.values.data() + k * d, di));
    const RowMatrix c = unflatten(std::span<const double>(covs.values).subspan(k * d * d, d * d), di, di);
    try {
      model.bank.covs.emplace_back(Matrix(c));
    } catch (const Error& e) {
      throw FormatError(name, std::string("covariance ") + std::to_string(k) + ": " + e.what());
    }
  }
  model.bank.alpha = Eigen::Map<const Vector>(alpha.values.data(), Ki);
  model.head.eta = unflatten(eta.values, static_cast<Eigen::Index>(N), Ki);
  model.head.beta = Eigen::Map<const Vector>(beta.values.data(), Ki);
  try {
    model.bank.validate();
    model.head.validate();
  } catch (const Error& e) {
    throw FormatError(name, e.what());
  }
  return model;
}

// ---------------------------------------------------------------------------
// Ground-truth sidecar
// ---------------------------------------------------------------------------

inline void save_ground_truth(const GroundTruth& truth, const fs::path& dir) {
  fs::create_directories(dir);
  const auto K = static_cast<std::uint64_t>(truth.bank.num_concepts());
  const auto d = static_cast<std::uint64_t>(truth.bank.dim());
  auto dims2 = [](const auto& m) {
    return std::array<std::uint64_t, 2>{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  };
  write_array_file<double>(dir / "theta.bin", dims2(truth.theta), flatten(truth.theta));
  write_array_file<std::int64_t>(dir / "z.bin", dims2(truth.z),
                                 std::span<const std::int64_t>(truth.z.data(), static_cast<std::size_t>(truth.z.size())));
  {
    std::ofstream out(dir / "bank.bin", std::ios::binary | std::ios::trunc);
    RowMatrix means(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(d));
    for (std::size_t k = 0; k < K; ++k) means.row(static_cast<Eigen::Index>(k)) = truth.bank.means[k].transpose();
    write_matrix(out, means);
    std::vector<Matrix> covs;
    for (const auto& c : truth.bank.covs) covs.push_back(c.matrix());
    write_stacked(out, covs);
    write_vector(out, truth.bank.alpha);
    if (!out) throw FormatError((dir / "bank.bin").string(), "write failed");
  }
  json meta{{"version", kFormatVersion}, {"K", K}, {"d", d}, {"palette", truth.palette}};
  if (truth.head.num_classes() > 0) {
    const RowMatrix eta = truth.head.eta;
    write_array_file<double>(dir / "eta.bin", dims2(eta), flatten(eta));
    meta["N"] = truth.head.num_classes();
  }
  if (truth.encoder.size() > 0) {
    const RowMatrix enc = truth.encoder;
    write_array_file<double>(dir / "encoder.bin", dims2(enc), flatten(enc));
    write_array_file<double>(dir / "palette_rgb.bin", dims2(truth.palette_rgb), flatten(truth.palette_rgb));
  }
  write_json_file(dir / "truth.json", meta);
}

inline GroundTruth load_ground_truth(const fs::path& dir) {
  const json meta = read_json_file(dir / "truth.json");
  GroundTruth truth;
  const auto K = meta.at("K").get<std::uint64_t>();
  const auto d = meta.at("d").get<std::uint64_t>();
  truth.palette = meta.value("palette", std::vector<std::string>{});
  const auto theta = read_array_file<double>(dir / "theta.bin");
  truth.theta = unflatten(theta.values, static_cast<Eigen::Index>(theta.dims.at(0)), static_cast<Eigen::Index>(theta.dims.at(1)));
  const auto z = read_array_file<std::int64_t>(dir / "z.bin");
  truth.z.resize(static_cast<Eigen::Index>(z.dims.at(0)), static_cast<Eigen::Index>(z.dims.at(1)));
  std::copy(z.values.begin(), z.values.end(), truth.z.data());
  {
    const auto path = dir / "bank.bin";
    std::ifstream in(path, std::ios::binary);
    const auto means = read_array<double>(in, path.string());
    expect_dims(means, {K, d}, path.string());
    const auto covs = read_array<double>(in, path.string());
    expect_dims(covs, {K, d, d}, path.string());
    const auto alpha = read_array<double>(in, path.string());
    expect_dims(alpha, {K}, path.string());
    const auto di = static_cast<Eigen::Index>(d);
    for (std::uint64_t k = 0; k < K; ++k) {
      truth.bank.means.push_back(Eigen::Map<const Vector>(means.values.data() + k * d, di));
      truth.bank.covs.emplace_back(Matrix(unflatten(std::span<const double>(covs.values).subspan(k * d * d, d * d), di, di)));
    }
    truth.bank.alpha = Eigen::Map<const Vector>(alpha.values.data(), static_cast<Eigen::Index>(K));
  }
  if (fs::exists(dir / "eta.bin")) {
    const auto eta = read_array_file<double>(dir / "eta.bin");
    truth.head.eta = unflatten(eta.values, static_cast<Eigen::Index>(eta.dims.at(0)), static_cast<Eigen::Index>(eta.dims.at(1)));
    truth.head.beta = Vector::Zero(static_cast<Eigen::Index>(K));
  }
  if (fs::exists(dir / "encoder.bin")) {
    const auto enc = read_array_file<double>(dir / "encoder.bin");
    truth.encoder = unflatten(enc.values, static_cast<Eigen::Index>(enc.dims.at(0)), static_cast<Eigen::Index>(enc.dims.at(1)));
    const auto rgb = read_array_file<double>(dir / "palette_rgb.bin");
    truth.palette_rgb = unflatten(rgb.values, static_cast<Eigen::Index>(rgb.dims.at(0)), static_cast<Eigen::Index>(rgb.dims.at(1)));
  }
  return truth;
}

}  // namespace pace::io
