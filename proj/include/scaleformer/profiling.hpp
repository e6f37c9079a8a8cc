#pragma once

#include <array>
#include <cstdint>

namespace scaleformer::profiling {

// Multiply-accumulate accounting. Counts matmul/conv MACs only, itemized so
// attention score+aggregation cost can be audited separately from the
// projection layers. Counting never touches numeric buffers, so enabling it
// cannot change results. State is thread-local; timing/bench runs are
// single-threaded.
enum class Bucket : int { kOther = 0, kProjection = 1, kAttention = 2 };

struct Counters {
    std::array<uint64_t, 3> macs{0, 0, 0};

    uint64_t total() const { return macs[0] + macs[1] + macs[2]; }
    uint64_t other() const { return macs[static_cast<int>(Bucket::kOther)]; }
    uint64_t projection() const { return macs[static_cast<int>(Bucket::kProjection)]; }
    uint64_t attention() const { return macs[static_cast<int>(Bucket::kAttention)]; }
};

struct State {
    bool enabled = false;
    Bucket bucket = Bucket::kOther;
    Counters counters;
};

inline State& state() {
    thread_local State s;
    return s;
}

inline void reset() { state().counters = Counters{}; }
inline void set_enabled(bool on) { state().enabled = on; }
inline bool enabled() { return state().enabled; }
inline const Counters& counters() { return state().counters; }

inline void add_macs(uint64_t n) {
    State& s = state();
    if (s.enabled) s.counters.macs[static_cast<int>(s.bucket)] += n;
}

// Routes MACs recorded inside the scope to the given bucket.
class BucketScope {
  public:
    explicit BucketScope(Bucket b) : prev_(state().bucket) { state().bucket = b; }
    ~BucketScope() { state().bucket = prev_; }
    BucketScope(const BucketScope&) = delete;
    BucketScope& operator=(const BucketScope&) = delete;

  private:
    Bucket prev_;
};

// Enables counting for the scope and restores the previous state after.
class EnableScope {
  public:
    EnableScope() : prev_(state().enabled) { state().enabled = true; }
    ~EnableScope() { state().enabled = prev_; }
    EnableScope(const EnableScope&) = delete;
    EnableScope& operator=(const EnableScope&) = delete;

  private:
    bool prev_;
};

}  // namespace scaleformer::profiling
