#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmoe/rng.hpp"

namespace cmoe {

// Byte-level tokenizer: ids are the bytes themselves, vocabulary 256.
std::vector<int> tokenize(const std::string& text);
std::string detokenize(const std::vector<int>& ids);

// Raw byte stream with a train/eval partition (eval is the file tail).
struct Corpus {
  std::vector<uint8_t> bytes;
  size_t train_end = 0;  // train = [0, train_end), eval = [train_end, size)

  static Corpus from_bytes(std::vector<uint8_t> bytes, double eval_fraction);
  static Corpus from_file(const std::string& path, double eval_fraction);

  size_t train_size() const { return train_end; }
  size_t eval_size() const { return bytes.size() - train_end; }
};

struct Batch {
  int64_t batch = 0;
  int64_t seq_len = 0;
  std::vector<int> input_ids;  // row-major [batch, seq_len]
  std::vector<int> targets;    // same grid shifted by one within each window
  // The final position of each window has no next byte inside the window and
  // is excluded from the loss.
  std::vector<uint8_t> target_valid;
};

// Deterministic epoch sampler over contiguous non-overlapping train windows,
// shuffled per epoch from the seed. Incomplete trailing batches are dropped.
class BatchIterator {
 public:
  BatchIterator(const Corpus& corpus, int64_t seq_len, int64_t batch, uint64_t seed);

  Batch next();
  int64_t windows_per_epoch() const { return static_cast<int64_t>(order_.size()); }
  int64_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  const Corpus* corpus_;
  int64_t seq_len_;
  int64_t batch_;
  uint64_t seed_;
  int64_t epoch_ = 0;
  size_t cursor_ = 0;
  std::vector<int64_t> order_;
};

// Fixed split-through view used by evaluation: consecutive windows, no
// shuffling, starting at the eval partition.
std::vector<Batch> eval_batches(const Corpus& corpus, int64_t seq_len, int64_t max_windows);

}  // namespace cmoe
