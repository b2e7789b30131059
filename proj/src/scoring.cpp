#include "covflow/scoring.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "covflow/errors.hpp"

namespace covflow::score {

namespace {

std::vector<std::uint64_t> default_ids(std::size_t n) {
  std::vector<std::uint64_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

Tensor slice_batch(const Tensor& images, std::size_t begin, std::size_t count) {
  const std::size_t chw = images.numel() / images.dim(0);
  Tensor out({count, images.dim(1), images.dim(2), images.dim(3)});
  std::copy(images.data() + begin * chw, images.data() + (begin + count) * chw, out.data());
  return out;
}

}  // namespace

std::vector<double> typicality_score(flow::FlowModel& model, const Tensor& images,
                                     std::uint64_t seed,
                                     std::span<const std::uint64_t> sample_ids) {
  return model.score(images, seed, sample_ids).grad_norm;
}

NormalizationStats compute_stats(flow::FlowModel& model, const Tensor& images,
                                 std::uint64_t seed, std::size_t batch_size) {
  if (images.rank() != 4) throw std::invalid_argument("compute_stats expects [N,C,H,W]");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const std::size_t n = images.dim(0);
  if (n < 2) throw ConfigError("normalization stats need at least 2 samples, got " +
                               std::to_string(n));
  StatsAccumulator acc;
  std::vector<std::uint64_t> ids = default_ids(n);
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t count = std::min(batch_size, n - begin);
    Tensor batch = slice_batch(images, begin, count);
    std::span<const std::uint64_t> bids(ids.data() + begin, count);
    auto sb = model.score(batch, seed, bids);
    for (std::size_t i = 0; i < count; ++i) acc.add(sb.ll[i].ll, sb.grad_norm[i]);
  }
  return acc.finalize(model.fingerprint());
}

std::vector<ScoreRecord> score_dataset(flow::FlowModel& model, const Tensor& images,
                                       const NormalizationStats* stats, std::uint64_t seed,
                                       std::size_t batch_size, std::size_t threads,
                                       std::span<const std::uint64_t> sample_ids) {
  if (images.rank() != 4) throw std::invalid_argument("score_dataset expects [N,C,H,W]");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  const std::size_t n = images.dim(0);
  std::vector<std::uint64_t> ids;
  if (sample_ids.empty()) {
    ids = default_ids(n);
    sample_ids = ids;
  } else if (sample_ids.size() != n) {
    throw std::invalid_argument("sample_ids length does not match the batch");
  }
  if (stats != nullptr) {
    stats->validate();
    if (stats->model_fingerprint != model.fingerprint()) {
      throw DataError("normalization stats fingerprint " + stats->model_fingerprint +
                      " does not match model " + model.fingerprint());
    }
  }

  std::vector<ScoreRecord> records(n);
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&]() {
    for (;;) {
      const std::size_t b = next.fetch_add(1);
      if (b >= batches) return;
      try {
        const std::size_t begin = b * batch_size;
        const std::size_t count = std::min(batch_size, n - begin);
        Tensor batch = slice_batch(images, begin, count);
        std::span<const std::uint64_t> bids(sample_ids.data() + begin, count);
        auto sb = model.score(batch, seed, bids);
        for (std::size_t i = 0; i < count; ++i) {
          ScoreRecord& r = records[begin + i];
          r.sample_id = sample_ids[begin + i];
          r.ll = sb.ll[i].ll;
          r.grad_norm = sb.grad_norm[i];
          if (stats != nullptr) {
            r.nsd = nsd_value(r.ll, r.grad_norm, *stats);
            r.has_nsd = true;
          }
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < std::min(threads, batches); ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return records;
}

std::string scores_csv(const std::vector<ScoreRecord>& records,
                       const std::string& config_comment) {
  std::string out;
  if (!config_comment.empty()) out += "# config " + config_comment + "\n";
  out += "sample_id,ll_nats,grad_norm,nsd\n";
  char buf[160];
  for (const ScoreRecord& r : records) {
    std::snprintf(buf, sizeof(buf), "%llu,%.17g,%.17g",
                  static_cast<unsigned long long>(r.sample_id), r.ll, r.grad_norm);
    out += buf;
    if (r.has_nsd) {
      std::snprintf(buf, sizeof(buf), ",%.17g", r.nsd);
      out += buf;
    } else {
      out += ",";
    }
    out += "\n";
  }
  return out;
}

}  // namespace covflow::score
