#pragma once

#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "modprompt/autograd.hpp"
#include "modprompt/rng.hpp"
#include "modprompt/tensor.hpp"

namespace modprompt {

// Frozen offline category embeddings E plus learnable residuals R. E stands
// in for a text encoder: category logits become name-dependent without any
// encoder in the loop, and inference stays a K x D add + renormalize.
struct EmbeddingBank {
  std::vector<std::string> vocab;
  Tensor base;      // [K,D], rows unit-norm, frozen
  Tensor residual;  // [K,D], zero-initialized, learnable
};

namespace detail {

constexpr int kTrigramBuckets = 256;

// Character-trigram counts of "^name$", hashed into a fixed bucket space.
inline std::vector<double> trigram_counts(const std::string& name) {
  std::vector<double> counts(kTrigramBuckets, 0.0);
  std::string padded = "^" + name + "$";
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    std::uint64_t h = hash_str(std::string_view(padded).substr(i, 3));
    counts[h % kTrigramBuckets] += 1.0;
  }
  return counts;
}

}  // namespace detail

// Deterministic toy text embedder: trigram counts through a fixed random
// projection, unit-normalized per row.
inline Tensor embed_offline(const std::vector<std::string>& vocab, int dim, std::uint64_t seed) {
  if (vocab.empty()) throw std::invalid_argument("embed_offline: empty vocabulary");
  std::set<std::string> uniq(vocab.begin(), vocab.end());
  if (uniq.size() != vocab.size())
    throw std::invalid_argument("embed_offline: duplicate category names");

  int K = static_cast<int>(vocab.size());
  Rng rng(hash_combine(seed, hash_str("embed-projection")));
  Tensor proj({dim, detail::kTrigramBuckets});
  for (auto& v : proj.v) v = rng.normal(0.0, 1.0 / std::sqrt(detail::kTrigramBuckets));

  Tensor out({K, dim});
  for (int k = 0; k < K; ++k) {
    auto counts = detail::trigram_counts(vocab[static_cast<std::size_t>(k)]);
    double norm2 = 0.0;
    for (int d = 0; d < dim; ++d) {
      double acc = 0.0;
      for (int b = 0; b < detail::kTrigramBuckets; ++b) acc += proj.at2(d, b) * counts[b];
      out.at2(k, d) = acc;
      norm2 += acc * acc;
    }
    double inv = 1.0 / std::sqrt(norm2);
    if (!std::isfinite(inv))
      throw std::runtime_error("embed_offline: degenerate embedding for '" +
                               vocab[static_cast<std::size_t>(k)] + "'");
    for (int d = 0; d < dim; ++d) out.at2(k, d) *= inv;
  }
  return out;
}

inline EmbeddingBank make_bank(const std::vector<std::string>& vocab, int dim,
                               std::uint64_t seed) {
  EmbeddingBank bank;
  bank.vocab = vocab;
  bank.base = embed_offline(vocab, dim, seed);
  bank.residual = Tensor({static_cast<int>(vocab.size()), dim});
  return bank;
}

// Row-normalized (E + R). Gradients flow into `residual_var` only; the base
// enters as a constant leaf.
inline Var effective_embeddings(const Tensor& base, const Var& residual_var) {
  if (base.shape != residual_var->val.shape)
    throw std::invalid_argument("effective_embeddings: shape mismatch");
  Var base_var = make_leaf(base, false);
  return l2norm_rows(add(base_var, residual_var));
}

inline Tensor effective_embeddings_value(const EmbeddingBank& bank) {
  Var r = make_leaf(bank.residual, false);
  return effective_embeddings(bank.base, r)->val;
}

// True iff the frozen base arrays are bitwise identical.
inline bool freeze_check(const EmbeddingBank& before, const EmbeddingBank& after) {
  return before.vocab == after.vocab && bitwise_equal(before.base, after.base);
}

}  // namespace modprompt
