#include "cmoe/data.hpp"

#include <fstream>
#include <stdexcept>

namespace cmoe {

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id > 255)
      throw std::invalid_argument("detokenize: id " + std::to_string(id) + " outside [0,256)");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

Corpus Corpus::from_bytes(std::vector<uint8_t> bytes, double eval_fraction) {
  if (eval_fraction < 0.0 || eval_fraction >= 1.0)
    throw std::invalid_argument("eval_fraction must be in [0,1)");
  Corpus c;
  c.bytes = std::move(bytes);
  const size_t eval = static_cast<size_t>(static_cast<double>(c.bytes.size()) * eval_fraction);
  c.train_end = c.bytes.size() - eval;
  return c;
}

Corpus Corpus::from_file(const std::string& path, double eval_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return from_bytes(std::move(bytes), eval_fraction);
}

namespace {

Batch windows_to_batch(const Corpus& corpus, const std::vector<int64_t>& starts,
                       int64_t seq_len) {
  Batch b;
  b.batch = static_cast<int64_t>(starts.size());
  b.seq_len = seq_len;
  b.input_ids.reserve(static_cast<size_t>(b.batch * seq_len));
  b.targets.reserve(static_cast<size_t>(b.batch * seq_len));
  b.target_valid.reserve(static_cast<size_t>(b.batch * seq_len));
  for (int64_t s : starts) {
    for (int64_t t = 0; t < seq_len; ++t) {
      const int cur = corpus.bytes[static_cast<size_t>(s + t)];
      b.input_ids.push_back(cur);
      if (t + 1 < seq_len) {
        b.targets.push_back(corpus.bytes[static_cast<size_t>(s + t + 1)]);
        b.target_valid.push_back(1);
      } else {
        b.targets.push_back(cur);
        b.target_valid.push_back(0);
      }
    }
  }
  return b;
}

}  // namespace

BatchIterator::BatchIterator(const Corpus& corpus, int64_t seq_len, int64_t batch, uint64_t seed)
    : corpus_(&corpus), seq_len_(seq_len), batch_(batch), seed_(seed) {
  if (seq_len < 2) throw std::invalid_argument("batch_iter: seq_len must be >= 2");
  if (batch < 1) throw std::invalid_argument("batch_iter: batch must be >= 1");
  const int64_t windows = static_cast<int64_t>(corpus.train_size()) / seq_len;
  if (windows < 1)
    throw std::invalid_argument("batch_iter: corpus train split (" +
                                std::to_string(corpus.train_size()) +
                                " bytes) shorter than seq_len " + std::to_string(seq_len));
  order_.resize(static_cast<size_t>(windows));
  for (int64_t i = 0; i < windows; ++i) order_[static_cast<size_t>(i)] = i * seq_len;
  reshuffle();
}

void BatchIterator::reshuffle() {
  Rng rng(seed_ + 0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(epoch_));
  rng.shuffle(order_);
  cursor_ = 0;
}

Batch BatchIterator::next() {
  if (cursor_ + static_cast<size_t>(batch_) > order_.size()) {
    ++epoch_;
    reshuffle();
    if (static_cast<size_t>(batch_) > order_.size())
      throw std::runtime_error("batch_iter: batch larger than windows per epoch");
  }
  std::vector<int64_t> starts(order_.begin() + static_cast<int64_t>(cursor_),
                              order_.begin() + static_cast<int64_t>(cursor_) + batch_);
  cursor_ += static_cast<size_t>(batch_);
  return windows_to_batch(*corpus_, starts, seq_len_);
}

std::vector<Batch> eval_batches(const Corpus& corpus, int64_t seq_len, int64_t max_windows) {
  std::vector<Batch> out;
  const int64_t avail = static_cast<int64_t>(corpus.eval_size()) / seq_len;
  const int64_t n = std::min(avail, max_windows);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t start = static_cast<int64_t>(corpus.train_end) + i * seq_len;
    out.push_back(windows_to_batch(corpus, {start}, seq_len));
  }
  return out;
}

}  // namespace cmoe
