#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "riemla/laplace.hpp"
#include "riemla/sampling.hpp"

namespace riemla {

/// Binary container shared by the posterior / MAP / sample files:
///   bytes 0..7   magic "RLABIN01"
///   bytes 8..11  little-endian u32 header length
///   header       UTF-8 JSON describing the payload (type, arch, shapes, ...)
///   payload      raw little-endian float64 arrays, in header order
/// Matrices are stored row-major.
namespace binio {

inline constexpr char kMagic[8] = {'R', 'L', 'A', 'B', 'I', 'N', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "binary serialization assumes a little-endian host");

inline void write_file(const std::string& path, const nlohmann::json& header,
                       const std::vector<const double*>& arrays,
                       const std::vector<std::size_t>& sizes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(kMagic, 8);
  std::string hdr = header.dump();
  std::uint32_t len = static_cast<std::uint32_t>(hdr.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (std::size_t i = 0; i < arrays.size(); ++i)
    out.write(reinterpret_cast<const char*>(arrays[i]),
              static_cast<std::streamsize>(sizes[i] * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline nlohmann::json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error(path + ": not a riemla binary file");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  std::string hdr(len, '\0');
  in.read(hdr.data(), len);
  if (!in) throw std::runtime_error(path + ": truncated header");
  return nlohmann::json::parse(hdr);
}

inline void read_doubles(std::ifstream& in, const std::string& path, double* dst, std::size_t n) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error(path + ": truncated payload");
}

}  // namespace binio

inline void save_posterior(const std::string& path, const LaplacePosterior& post) {
  const int k = post.param_count();
  nlohmann::json header = {
      {"type", "laplace-posterior"},
      {"version", 1},
      {"arch", post.arch.layer_widths},
      {"alpha", post.alpha},
      {"sigma2", post.sigma2},
      {"hessian_kind", post.hessian_kind == HessianKind::exact ? "exact" : "ggn"},
      {"k", k},
      {"arrays", {"theta_star", "chol_cov"}},
  };
  RowMajorMatrix chol = post.chol_cov;  // row-major on disk
  binio::write_file(path, header, {post.theta_star.data(), chol.data()},
                    {static_cast<std::size_t>(k), static_cast<std::size_t>(k) * k});
}

inline LaplacePosterior load_posterior(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json header = binio::read_header(in, path);
  if (header.at("type") != "laplace-posterior")
    throw std::runtime_error(path + ": expected a laplace-posterior file, got " +
                             header.at("type").get<std::string>());
  LaplacePosterior post;
  post.arch = MlpArchitecture(header.at("arch").get<std::vector<int>>());
  post.alpha = header.at("alpha").get<double>();
  post.sigma2 = header.at("sigma2").get<double>();
  post.hessian_kind =
      header.at("hessian_kind") == "exact" ? HessianKind::exact : HessianKind::ggn;
  const int k = header.at("k").get<int>();
  if (k != post.arch.param_count()) throw std::runtime_error(path + ": K/architecture mismatch");
  post.theta_star.resize(k);
  binio::read_doubles(in, path, post.theta_star.data(), static_cast<std::size_t>(k));
  RowMajorMatrix chol(k, k);
  binio::read_doubles(in, path, chol.data(), static_cast<std::size_t>(k) * k);
  post.chol_cov = chol;
  // reconstruct the precision from the stored factor
  Matrix cov = post.chol_cov * post.chol_cov.transpose();
  post.precision = cov.llt().solve(Matrix::Identity(k, k));
  post.precision = 0.5 * (post.precision + post.precision.transpose());
  return post;
}

inline void save_map_estimate(const std::string& path, const MlpArchitecture& arch,
                              const MapEstimate& est) {
  nlohmann::json header = {
      {"type", "map-estimate"},
      {"version", 1},
      {"arch", arch.layer_widths},
      {"final_loss", est.final_loss},
      {"grad_norm", est.grad_norm},
      {"stationary", est.stationary},
      {"k", arch.param_count()},
      {"arrays", {"theta"}},
  };
  binio::write_file(path, header, {est.theta.data()},
                    {static_cast<std::size_t>(arch.param_count())});
}

inline std::pair<MlpArchitecture, MapEstimate> load_map_estimate(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json header = binio::read_header(in, path);
  if (header.at("type") != "map-estimate")
    throw std::runtime_error(path + ": expected a map-estimate file");
  MlpArchitecture arch(header.at("arch").get<std::vector<int>>());
  MapEstimate est;
  est.final_loss = header.at("final_loss").get<double>();
  est.grad_norm = header.at("grad_norm").get<double>();
  est.stationary = header.at("stationary").get<bool>();
  est.theta.resize(arch.param_count());
  binio::read_doubles(in, path, est.theta.data(), static_cast<std::size_t>(arch.param_count()));
  return {arch, est};
}

inline void save_samples(const std::string& path, const MlpArchitecture& arch,
                         const std::vector<PosteriorSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("save_samples: empty sample list");
  const int k = arch.param_count();
  const long s = static_cast<long>(samples.size());
  RowMajorMatrix thetas(s, k);
  for (long i = 0; i < s; ++i) thetas.row(i) = samples[static_cast<std::size_t>(i)].theta;
  nlohmann::json header = {
      {"type", "posterior-samples"},
      {"version", 1},
      {"arch", arch.layer_widths},
      {"kind", sample_kind_name(samples.front().mode.kind)},
      {"batch_size", samples.front().mode.batch_size},
      {"s", s},
      {"k", k},
      {"arrays", {"thetas"}},
  };
  binio::write_file(path, header, {thetas.data()}, {static_cast<std::size_t>(s) * k});
}

inline std::vector<PosteriorSample> load_samples(const std::string& path,
                                                 MlpArchitecture* arch_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json header = binio::read_header(in, path);
  if (header.at("type") != "posterior-samples")
    throw std::runtime_error(path + ": expected a posterior-samples file");
  MlpArchitecture arch(header.at("arch").get<std::vector<int>>());
  const long s = header.at("s").get<long>();
  const int k = header.at("k").get<int>();
  std::string kind = header.at("kind").get<std::string>();
  SampleMode mode;
  mode.kind = kind == "vanilla" ? SampleKind::vanilla
              : kind == "riem"  ? SampleKind::riem
                                : SampleKind::lin_riem;
  mode.batch_size = header.at("batch_size").get<int>();
  RowMajorMatrix thetas(s, k);
  binio::read_doubles(in, path, thetas.data(), static_cast<std::size_t>(s) * k);
  std::vector<PosteriorSample> samples(static_cast<std::size_t>(s));
  for (long i = 0; i < s; ++i) {
    samples[static_cast<std::size_t>(i)].theta = thetas.row(i).transpose();
    samples[static_cast<std::size_t>(i)].mode = mode;
  }
  if (arch_out) *arch_out = arch;
  return samples;
}

}  // namespace riemla
