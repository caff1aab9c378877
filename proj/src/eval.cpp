#include "iau/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "iau/error.hpp"
#include "iau/tensor_io.hpp"

namespace iau::eval {

namespace {

std::vector<double> unit_rows(std::span<const double> values, std::size_t rows, std::size_t dim,
                              const char* what) {
  std::vector<double> out(values.begin(), values.end());
  for (std::size_t r = 0; r < rows; ++r) {
    double norm = 0;
    for (std::size_t j = 0; j < dim; ++j) norm += out[r * dim + j] * out[r * dim + j];
    norm = std::sqrt(norm);
    if (!(norm > 0)) throw ContractError(std::string("rank_gallery: ") + what + " embedding " + std::to_string(r) + " has zero norm");
    for (std::size_t j = 0; j < dim; ++j) out[r * dim + j] /= norm;
  }
  return out;
}

template <typename Real>
std::vector<double> as_double(const Tensor<Real>& t) {
  return {t.data().begin(), t.data().end()};
}

void write_matrix_csv(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                      std::span<const float> values) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  char buf[32];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.6g", static_cast<double>(values[r * cols + c]));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace

template <typename Real>
std::vector<std::vector<std::size_t>> rank_gallery(const Tensor<Real>& query, const Tensor<Real>& gallery,
                                                   const Labels& ql, const Labels& gl) {
  if (query.rank() != 2 || gallery.rank() != 2 || query.dim(1) != gallery.dim(1))
    throw DimensionError("rank_gallery: embeddings " + to_string(query.shape()) + " and " +
                         to_string(gallery.shape()) + " differ in dimension");
  const std::size_t nq = query.dim(0), ng = gallery.dim(0), d = query.dim(1);
  if (ng == 0) throw ContractError("rank_gallery: empty gallery");
  if (ql.identities.size() != nq || ql.cameras.size() != nq || gl.identities.size() != ng || gl.cameras.size() != ng)
    throw ContractError("rank_gallery: label counts do not match the embeddings");
  const auto qn = unit_rows(as_double(query), nq, d, "query");
  const auto gn = unit_rows(as_double(gallery), ng, d, "gallery");
  std::vector<std::vector<std::size_t>> out(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<double> sim(ng);
    for (std::size_t g = 0; g < ng; ++g) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += qn[q * d + j] * gn[g * d + j];
      sim[g] = s;
    }
    auto& order = out[q];
    for (std::size_t g = 0; g < ng; ++g)
      if (!(gl.identities[g] == ql.identities[q] && gl.cameras[g] == ql.cameras[q])) order.push_back(g);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  }
  return out;
}

std::vector<std::vector<bool>> relevance(const std::vector<std::vector<std::size_t>>& rankings,
                                         const Labels& ql, const Labels& gl) {
  std::vector<std::vector<bool>> out(rankings.size());
  for (std::size_t q = 0; q < rankings.size(); ++q)
    for (auto g : rankings[q]) out[q].push_back(gl.identities.at(g) == ql.identities.at(q));
  return out;
}

ApResult mean_average_precision(const std::vector<std::vector<bool>>& rel) {
  ApResult r;
  double total = 0;
  for (std::size_t q = 0; q < rel.size(); ++q) {
    double hits = 0, sum = 0;
    for (std::size_t k = 0; k < rel[q].size(); ++k)
      if (rel[q][k]) {
        hits += 1;
        sum += hits / static_cast<double>(k + 1);
      }
    if (hits == 0) {
      r.excluded.push_back(q);
      continue;
    }
    r.evaluated.push_back(q);
    r.ap.push_back(sum / hits);
    total += sum / hits;
  }
  r.map = r.ap.empty() ? 0.0 : total / static_cast<double>(r.ap.size());
  return r;
}

std::vector<double> cmc_curve(const std::vector<std::vector<bool>>& rel, std::size_t max_k) {
  std::vector<double> cmc(max_k, 0.0);
  std::size_t evaluated = 0;
  for (const auto& row : rel) {
    if (max_k > row.size())
      throw ContractError("cmc_curve: max_k " + std::to_string(max_k) + " exceeds ranking length " + std::to_string(row.size()));
    auto first = std::find(row.begin(), row.end(), true);
    if (first == row.end()) continue;
    ++evaluated;
    for (auto k = static_cast<std::size_t>(first - row.begin()); k < max_k; ++k) cmc[k] += 1;
  }
  if (evaluated)
    for (auto& v : cmc) v /= static_cast<double>(evaluated);
  return cmc;
}

template <typename Real>
RetrievalResult evaluate(const Tensor<Real>& query, const Tensor<Real>& gallery, const Labels& ql,
                         const Labels& gl, std::size_t max_k) {
  RetrievalResult r;
  r.rankings = rank_gallery(query, gallery, ql, gl);
  auto rel = relevance(r.rankings, ql, gl);
  r.ap = mean_average_precision(rel);
  // Rankings shorter than max_k (small galleries, exclusions) cannot match past their end.
  for (auto& row : rel)
    if (row.size() < max_k) row.resize(max_k, false);
  r.cmc = cmc_curve(rel, max_k);
  r.map = r.ap.map;
  return r;
}

Protocol make_protocol(const data::Dataset& dataset, const std::vector<std::size_t>& identities) {
  Protocol p;
  for (auto id : identities) {
    auto seqs = dataset.sequences_of(id);
    p.queries.insert(p.queries.end(), seqs.begin(), seqs.end());
    p.gallery.insert(p.gallery.end(), seqs.begin(), seqs.end());
  }
  return p;
}

Labels labels_of(const data::Dataset& dataset, const std::vector<std::size_t>& sequences) {
  Labels l;
  for (auto s : sequences) {
    l.identities.push_back(dataset.sequences.at(s).identity);
    l.cameras.push_back(dataset.sequences.at(s).camera);
  }
  return l;
}

TensorF embed_sequences(ModelF& model, const data::Dataset& dataset, const std::vector<std::size_t>& sequences,
                        std::size_t stride, std::size_t clips) {
  if (clips < 1) throw ConfigError("data.eval_clips must be >= 1");
  NoGradGuard no_grad;
  const std::size_t t = model.config().frames;
  std::vector<std::size_t> seq_of_clip, starts;
  for (auto s : sequences) {
    const std::size_t len = dataset.length(s);
    for (std::size_t c = 0; c < clips; ++c) {
      seq_of_clip.push_back(s);
      starts.push_back(c * len / clips);
    }
  }
  constexpr std::size_t kChunk = 16;
  std::vector<float> sums;
  std::size_t dim = 0;
  for (std::size_t begin = 0; begin < seq_of_clip.size(); begin += kChunk) {
    const std::size_t end = std::min(seq_of_clip.size(), begin + kChunk);
    std::vector<std::size_t> seqs(seq_of_clip.begin() + begin, seq_of_clip.begin() + end);
    std::vector<std::size_t> st(starts.begin() + begin, starts.begin() + end);
    auto batch = data::gather_clips(dataset, seqs, st, t, stride);
    auto emb = model.forward(batch.frames, false).embeddings;
    dim = emb.dim(1);
    if (sums.empty()) sums.assign(sequences.size() * dim, 0.0f);
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t j = 0; j < dim; ++j) sums[(i / clips) * dim + j] += emb.data()[(i - begin) * dim + j];
  }
  for (auto& v : sums) v /= static_cast<float>(clips);
  return TensorF({sequences.size(), dim}, std::move(sums));
}

void write_metrics_csv(const std::filesystem::path& path, const RetrievalResult& r) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  auto cmc_at = [&](std::size_t k) { return k <= r.cmc.size() ? r.cmc[k - 1] : (r.cmc.empty() ? 0.0 : r.cmc.back()); };
  char buf[64];
  out << "metric,value\n";
  std::snprintf(buf, sizeof buf, "map,%.6f\n", r.map);
  out << buf;
  for (std::size_t k : {1, 5, 10}) {
    std::snprintf(buf, sizeof buf, "cmc_%zu,%.6f\n", k, cmc_at(k));
    out << buf;
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<std::size_t> subsample_indices(std::size_t n, std::size_t limit) {
  const std::size_t step = (n + limit - 1) / limit;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; i += std::max<std::size_t>(step, 1)) out.push_back(i);
  return out;
}

std::vector<std::filesystem::path> dump_diagnostics(ModelF& model, const TensorF& clip,
                                                    const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  if (clip.rank() != 4) throw DimensionError("dump_diagnostics: clip must be [T x H x W x 3], got " + to_string(clip.shape()));
  NoGradGuard no_grad;
  Shape batch_shape = {1};
  batch_shape.insert(batch_shape.end(), clip.shape().begin(), clip.shape().end());
  auto out = model.forward(TensorF(batch_shape, {clip.data().begin(), clip.data().end()}), false);

  std::vector<fs::path> written;
  auto save = [&](const std::string& name, const TensorF& t) {
    io::save_tensor(dir / name, t);
    written.push_back(dir / name);
  };
  auto csv = [&](const std::string& name, std::size_t rows, std::size_t cols, std::span<const float> v) {
    write_matrix_csv(dir / name, rows, cols, v);
    written.push_back(dir / name);
  };
  for (std::size_t k = 0; k < out.blocks.size(); ++k) {
    const std::string stage = "stage" + std::to_string(out.iau_stages[k]);
    const auto& block = out.blocks[k];
    if (!block.stiau.empty()) {
      const auto& st = block.stiau.front();
      const auto& a = st.attention;
      const std::size_t t = a.dim(0), h = a.dim(1), w = a.dim(2), n = a.dim(3);
      save(stage + "_attention.iaut", a);
      for (std::size_t f = 0; f < t; ++f) {
        auto frame = a.data().subspan(f * h * w * n, h * w * n);
        const std::string base = stage + "_attention_t" + std::to_string(f);
        csv(base + ".csv", h * w, n, frame);
        for (std::size_t p = 0; p < n; ++p) {
          std::vector<float> plane(h * w);
          for (std::size_t i = 0; i < h * w; ++i) plane[i] = frame[i * n + p];
          csv(base + "_p" + std::to_string(p) + ".csv", h, w, plane);
        }
      }
      const auto& rel = st.relations;
      save(stage + "_spatial.iaut", rel.spatial);
      csv(stage + "_spatial.csv", rel.spatial.dim(0) * rel.spatial.dim(1), rel.spatial.dim(2), rel.spatial.data());
      if (rel.temporal.defined()) {
        save(stage + "_temporal.iaut", rel.temporal);
        csv(stage + "_temporal.csv", rel.temporal.dim(0) * rel.temporal.dim(1), rel.temporal.dim(2), rel.temporal.data());
      }
      save(stage + "_relation.iaut", rel.normalized);
      csv(stage + "_relation.csv", rel.normalized.dim(0), rel.normalized.dim(1), rel.normalized.data());
    }
    if (!block.ciau.empty()) {
      const auto& c = block.ciau.front().relation;
      const auto keep = subsample_indices(c.dim(0), 64);
      std::vector<float> sub;
      for (auto i : keep)
        for (auto j : keep) sub.push_back(c.data()[i * c.dim(1) + j]);
      TensorF small({keep.size(), keep.size()}, std::move(sub));
      save(stage + "_channel.iaut", small);
      csv(stage + "_channel.csv", keep.size(), keep.size(), small.data());
    }
  }
  return written;
}

template std::vector<std::vector<std::size_t>> rank_gallery(const TensorF&, const TensorF&, const Labels&, const Labels&);
template std::vector<std::vector<std::size_t>> rank_gallery(const TensorD&, const TensorD&, const Labels&, const Labels&);
template RetrievalResult evaluate(const TensorF&, const TensorF&, const Labels&, const Labels&, std::size_t);
template RetrievalResult evaluate(const TensorD&, const TensorD&, const Labels&, const Labels&, std::size_t);

}  // namespace iau::eval
