#pragma once

#include "unicue/corpus.hpp"
#include "unicue/layers.hpp"

// CSR head: transformer text decoder over the mixed visual embedding with
// cross-entropy training, greedy decoding, and WER scoring.

namespace unicue {

template <class S>
struct CsrDecoder {
  Embedding<S> embed;
  TransformerDecoder<S> decoder;
  Linear<S> head;  // zero-initialized: uniform distribution at step 0

  CsrDecoder() = default;
  CsrDecoder(int vocab, AttentionConfig cfg, int depth, Rng& rng)
      : embed(vocab, cfg.dim, rng), decoder(cfg, depth, rng), head(cfg.dim, vocab, rng, true, /*zero_init=*/true) {}

  // causal self-attention over the BOS-initiated prefix, cross-attention to
  // the visual memory, logits per position
  Tensor<S> decode_logits(const Tensor<S>& zmv, const std::vector<int>& prefix) const {
    if (prefix.empty()) throw std::invalid_argument("decode_logits: empty prefix");
    if (prefix.front() != kBosId)
      throw std::invalid_argument("decode_logits: prefix must start with BOS, got id " + std::to_string(prefix.front()));
    const S emb_scale = std::sqrt(static_cast<S>(embed.table.dim(1)));
    Tensor<S> h = add_positional(scale(embed.forward(prefix), emb_scale));
    Tensor<S> mask = causal_mask<S>(static_cast<int>(prefix.size()));
    Tensor<S> dec = decoder.forward(h, zmv, mask);
    return head.forward(dec);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    embed.collect(prefix + ".embed", out);
    decoder.collect(prefix + ".dec", out);
    head.collect(prefix + ".head", out);
  }
};

// teacher-forced targets for a transcript: prefix = BOS + tokens (+PAD...),
// targets = tokens + EOS (+PAD...)
struct TeacherForced {
  std::vector<int> prefix;
  std::vector<int> targets;
};

inline TeacherForced teacher_forcing(const std::vector<int>& transcript, int pad_to = 0) {
  TeacherForced tf;
  tf.prefix.push_back(kBosId);
  for (int t : transcript) tf.prefix.push_back(t);
  tf.targets = transcript;
  tf.targets.push_back(kEosId);
  while (pad_to > static_cast<int>(tf.prefix.size())) {
    tf.prefix.push_back(kPadId);
    tf.targets.push_back(kPadId);
  }
  return tf;
}

// mean over non-PAD positions of -log softmax(logits)[target]
template <class S>
Tensor<S> csr_loss(const Tensor<S>& logits, const std::vector<int>& targets) {
  bool any_active = false;
  for (int t : targets) any_active |= (t != kPadId);
  if (!any_active) throw std::invalid_argument("csr_loss: all-PAD target");
  return cross_entropy(logits, targets, kPadId);
}

// argmax next token from BOS until EOS or max_len tokens; ties break to the
// lowest id because the scan keeps the first maximum
template <class S>
std::vector<int> greedy_decode(const CsrDecoder<S>& model, const Tensor<S>& zmv, int max_len) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  NoTapeScope<S> no_tape;
  std::vector<int> prefix = {kBosId};
  std::vector<int> out;
  for (int step = 0; step < max_len; ++step) {
    Tensor<S> logits = model.decode_logits(zmv, prefix);
    const int v = logits.dim(1);
    const S* row = logits.data() + static_cast<size_t>(logits.dim(0) - 1) * v;
    int best = 0;
    for (int j = 1; j < v; ++j)
      if (row[j] > row[best]) best = j;
    if (best == kEosId) break;
    out.push_back(best);
    prefix.push_back(best);
  }
  return out;
}

inline std::vector<int> strip_special(const std::vector<int>& ids) {
  std::vector<int> out;
  for (int t : ids)
    if (t != kPadId && t != kBosId && t != kEosId) out.push_back(t);
  return out;
}

// levenshtein(sub=ins=del=1) / reference length, over syllable tokens
inline double wer(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
  const std::vector<int> ref = strip_special(reference);
  const std::vector<int> hyp = strip_special(hypothesis);
  if (ref.empty()) throw std::invalid_argument("wer: empty reference");
  const size_t n = ref.size(), m = hyp.size();
  std::vector<size_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = j;
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= m; ++j) {
      const size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[m]) / static_cast<double>(n);
}

}  // namespace unicue
