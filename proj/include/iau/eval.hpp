#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "iau/data.hpp"
#include "iau/model.hpp"

// Retrieval metrics and diagnostic dumps.
namespace iau::eval {

struct Labels {
  std::vector<std::size_t> identities;
  std::vector<std::size_t> cameras;
};

// Per query, gallery indices by descending cosine similarity, ties broken by
// ascending index. Entries with the query's identity and camera are removed.
// Zero-norm embeddings throw ContractError.
template <typename Real>
std::vector<std::vector<std::size_t>> rank_gallery(const Tensor<Real>& query, const Tensor<Real>& gallery,
                                                   const Labels& query_labels, const Labels& gallery_labels);

// relevance[q][r]: the item at rank r shares the query's identity.
std::vector<std::vector<bool>> relevance(const std::vector<std::vector<std::size_t>>& rankings,
                                         const Labels& query_labels, const Labels& gallery_labels);

struct ApResult {
  double map = 0.0;
  std::vector<double> ap;              // per evaluated query
  std::vector<std::size_t> evaluated;  // query indices with >= 1 relevant item
  std::vector<std::size_t> excluded;   // query indices with none
};

// AP = (1 / #relevant) * sum over relevant ranks r of precision@r, averaged
// over queries that have a relevant item.
ApResult mean_average_precision(const std::vector<std::vector<bool>>& relevance);

// cmc[k-1] = share of evaluated queries with a relevant item in the top k.
// max_k larger than a ranking's length throws ContractError.
std::vector<double> cmc_curve(const std::vector<std::vector<bool>>& relevance, std::size_t max_k);

struct RetrievalResult {
  std::vector<std::vector<std::size_t>> rankings;
  ApResult ap;
  std::vector<double> cmc;
  double map = 0.0;
};

template <typename Real>
RetrievalResult evaluate(const Tensor<Real>& query, const Tensor<Real>& gallery, const Labels& query_labels,
                         const Labels& gallery_labels, std::size_t max_k = 10);

// Every sequence of the listed identities is both a query and a gallery
// entry; the camera rule removes a query's own sequence from its ranking.
struct Protocol {
  std::vector<std::size_t> queries;
  std::vector<std::size_t> gallery;
};
Protocol make_protocol(const data::Dataset& dataset, const std::vector<std::size_t>& identities);
Labels labels_of(const data::Dataset& dataset, const std::vector<std::size_t>& sequences);

// Embeddings [n x D] of the listed sequences: the mean over `clips` evenly
// spaced clips of model.config().frames frames at `stride`, BN in eval mode.
TensorF embed_sequences(ModelF& model, const data::Dataset& dataset, const std::vector<std::size_t>& sequences,
                        std::size_t stride, std::size_t clips);

// Metrics file: header "metric,value" then map, cmc_1, cmc_5, cmc_10.
void write_metrics_csv(const std::filesystem::path& path, const RetrievalResult& result);

// Writes, per IAU stage s, raw tensor files and CSVs of the attention maps
// (stage{s}_attention.iaut [T x h x w x N]; per frame an (h*w) x N CSV and N
// h x w CSVs), spatial maps S, temporal maps, normalized relation R and the
// channel map C (subsampled to at most 64 x 64). `clip` is [T x H x W x 3].
// Returns the written paths in order.
std::vector<std::filesystem::path> dump_diagnostics(ModelF& model, const TensorF& clip,
                                                    const std::filesystem::path& out_dir);

// Rows and columns of an n x n map kept when subsampling to at most `limit`.
std::vector<std::size_t> subsample_indices(std::size_t n, std::size_t limit);

}  // namespace iau::eval
