/*
 * Copyright 2026 The upmu Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "upmu/store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>

#include "upmu/error.hpp"

namespace upmu::store {

static_assert(std::endian::native == std::endian::little, "on-disk format assumes a little-endian host");

namespace {

using u128 = unsigned __int128;

constexpr int kFanout = 1 << kFanoutBits;
constexpr std::size_t kLeafCapacity = 1024;
constexpr int kRootPointwidth = 64;
constexpr std::uint64_t kSignFlip = std::uint64_t{1} << 63;
constexpr std::size_t kMaxWindows = 50'000'000;

constexpr char kMagic[8] = {'U', 'P', 'M', 'U', 'S', 'T', 'R', '\x01'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint8_t kNodeRecord = 1;
constexpr std::uint8_t kRootRecord = 2;

std::uint64_t to_u(std::int64_t t) { return static_cast<std::uint64_t>(t) ^ kSignFlip; }
std::int64_t to_t(std::uint64_t u) { return static_cast<std::int64_t>(u ^ kSignFlip); }
u128 width(int pw) { return u128{1} << pw; }

struct Summary {
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  std::uint64_t count = 0;

  void add(double v) {
    min = std::min(min, v);
    max = std::max(max, v);
    sum += v;
    ++count;
  }
  void merge(const Summary& o) {
    if (o.count == 0) return;
    min = std::min(min, o.min);
    max = std::max(max, o.max);
    sum += o.sum;
    count += o.count;
  }
};

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
  int pw = kRootPointwidth;
  std::uint64_t start = 0;
  bool leaf = true;
  std::vector<Point> points;
  std::array<NodePtr, kFanout> child{};
  std::array<Summary, kFanout> child_sum{};
  Summary total;
  std::uint64_t id = 0;  // log record id; 0 when volatile

  std::size_t slot(std::uint64_t u) const { return static_cast<std::size_t>((u128{u} - start) >> (pw - kFanoutBits)); }
  std::uint64_t child_start(std::size_t i) const {
    return static_cast<std::uint64_t>(u128{start} + (u128{i} << (pw - kFanoutBits)));
  }
};

std::uint32_t fnv1a(const std::string& bytes) {
  std::uint32_t h = 2166136261u;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 16777619u;
  }
  return h;
}

template <class T>
void put(std::string& buf, const T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > buf_.size()) throw Error(ErrorCode::StorageCorrupt, "record shorter than its fields");
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    if (pos_ + n > buf_.size()) throw Error(ErrorCode::StorageCorrupt, "record shorter than its fields");
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

std::int64_t align_down(std::int64_t t, int pointwidth) {
  if (pointwidth < 0 || pointwidth > kMaxQueryPointwidth) {
    throw Error(ErrorCode::InvalidPointwidth, "pointwidth must lie in [0, 62]");
  }
  const std::int64_t w = std::int64_t{1} << pointwidth;
  return t - (((t % w) + w) % w);
}

StreamKey StreamKey::parse(std::string_view text) {
  const auto slash = text.find('/');
  if (slash == std::string_view::npos || slash == 0 || slash + 1 == text.size()) {
    throw Error(ErrorCode::InvalidArgument, "stream key must look like meter/channel: '" + std::string(text) + "'");
  }
  return {std::string(text.substr(0, slash)), std::string(text.substr(slash + 1))};
}

struct Store::Impl {
  struct Stream {
    std::mutex writer;
    mutable std::shared_mutex versions_mu;
    std::vector<NodePtr> roots{nullptr};  // roots[v]; version 0 is empty
  };

  std::optional<std::filesystem::path> dir;
  std::ofstream log;
  std::mutex log_mu;
  std::uint64_t next_id = 1;

  mutable std::shared_mutex streams_mu;
  std::map<StreamKey, std::unique_ptr<Stream>> streams;

  // ---- persistence ----

  void append_record(std::uint8_t type, const std::string& payload) {
    std::string rec;
    put(rec, type);
    put(rec, static_cast<std::uint32_t>(payload.size()));
    rec += payload;
    put(rec, fnv1a(payload));
    log.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    if (!log) throw Error(ErrorCode::StorageCorrupt, "failed writing the segment log");
  }

  void persist(Node& n) {
    if (!dir) return;
    std::string p;
    std::lock_guard lock(log_mu);
    n.id = next_id++;
    put(p, n.id);
    put(p, static_cast<std::uint8_t>(n.pw));
    put(p, n.start);
    put(p, static_cast<std::uint8_t>(n.leaf ? 1 : 0));
    if (n.leaf) {
      put(p, static_cast<std::uint32_t>(n.points.size()));
      for (const Point& pt : n.points) {
        put(p, pt.time);
        put(p, pt.value);
      }
    } else {
      std::uint64_t mask = 0;
      for (std::size_t i = 0; i < kFanout; ++i)
        if (n.child[i]) mask |= std::uint64_t{1} << i;
      put(p, mask);
      for (std::size_t i = 0; i < kFanout; ++i) {
        if (!n.child[i]) continue;
        put(p, n.child[i]->id);
        put(p, n.child_sum[i].min);
        put(p, n.child_sum[i].max);
        put(p, n.child_sum[i].sum);
        put(p, n.child_sum[i].count);
      }
    }
    append_record(kNodeRecord, p);
  }

  void persist_root(const StreamKey& key, Version v, const NodePtr& root) {
    if (!dir) return;
    std::string p;
    const std::string name = key.str();
    put(p, static_cast<std::uint16_t>(name.size()));
    p += name;
    put(p, v);
    put(p, root ? root->id : std::uint64_t{0});
    std::lock_guard lock(log_mu);
    append_record(kRootRecord, p);
    log.flush();
    if (!log) throw Error(ErrorCode::StorageCorrupt, "failed flushing the segment log");
  }

  void replay(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (all.size() < 16 || std::memcmp(all.data(), kMagic, 8) != 0) {
      throw Error(ErrorCode::StorageCorrupt, "bad magic in " + file.string());
    }
    std::uint32_t fmt;
    std::memcpy(&fmt, all.data() + 8, 4);
    if (fmt != kFormatVersion) throw Error(ErrorCode::StorageCorrupt, "unsupported store format " + std::to_string(fmt));
    std::unordered_map<std::uint64_t, NodePtr> nodes;
    std::size_t pos = 16;
    while (pos < all.size()) {
      if (pos + 5 > all.size()) break;  // torn tail
      const auto type = static_cast<std::uint8_t>(all[pos]);
      std::uint32_t len;
      std::memcpy(&len, all.data() + pos + 1, 4);
      if (pos + 5 + len + 4 > all.size()) break;  // torn tail
      const std::string payload = all.substr(pos + 5, len);
      std::uint32_t sum;
      std::memcpy(&sum, all.data() + pos + 5 + len, 4);
      if (sum != fnv1a(payload)) throw Error(ErrorCode::StorageCorrupt, "checksum mismatch at offset " + std::to_string(pos));
      pos += 5 + len + 4;
      Reader r(payload);
      if (type == kNodeRecord) {
        auto n = std::make_shared<Node>();
        n->id = r.get<std::uint64_t>();
        n->pw = r.get<std::uint8_t>();
        n->start = r.get<std::uint64_t>();
        n->leaf = r.get<std::uint8_t>() != 0;
        if (n->leaf) {
          const auto count = r.get<std::uint32_t>();
          n->points.resize(count);
          for (auto& pt : n->points) {
            pt.time = r.get<std::int64_t>();
            pt.value = r.get<double>();
            n->total.add(pt.value);
          }
        } else {
          const auto mask = r.get<std::uint64_t>();
          for (std::size_t i = 0; i < kFanout; ++i) {
            if (!(mask >> i & 1)) continue;
            const auto cid = r.get<std::uint64_t>();
            auto it = nodes.find(cid);
            if (it == nodes.end()) throw Error(ErrorCode::StorageCorrupt, "dangling child reference");
            n->child[i] = it->second;
            n->child_sum[i].min = r.get<double>();
            n->child_sum[i].max = r.get<double>();
            n->child_sum[i].sum = r.get<double>();
            n->child_sum[i].count = r.get<std::uint64_t>();
            n->total.merge(n->child_sum[i]);
          }
        }
        next_id = std::max(next_id, n->id + 1);
        nodes.emplace(n->id, std::move(n));
      } else if (type == kRootRecord) {
        const auto len16 = r.get<std::uint16_t>();
        const StreamKey key = StreamKey::parse(r.bytes(len16));
        const auto v = r.get<Version>();
        const auto rid = r.get<std::uint64_t>();
        NodePtr root;
        if (rid != 0) {
          auto it = nodes.find(rid);
          if (it == nodes.end()) throw Error(ErrorCode::StorageCorrupt, "dangling root reference");
          root = it->second;
        }
        auto& s = streams[key];
        if (!s) s = std::make_unique<Stream>();
        if (v != s->roots.size()) throw Error(ErrorCode::StorageCorrupt, "non-contiguous versions for " + key.str());
        s->roots.push_back(std::move(root));
      } else {
        throw Error(ErrorCode::StorageCorrupt, "unknown record type " + std::to_string(type));
      }
    }
  }

  // ---- tree construction ----

  NodePtr make_leaf(int pw, std::uint64_t start, std::vector<Point> pts) {
    auto n = std::make_shared<Node>();
    n->pw = pw;
    n->start = start;
    n->leaf = true;
    n->points = std::move(pts);
    for (const Point& p : n->points) n->total.add(p.value);
    persist(*n);
    return n;
  }

  /// Copy-on-write insert of sorted `pts` (all inside the node's range).
  NodePtr build(const Node* old, int pw, std::uint64_t start, std::span<const Point> pts) {
    if (old && old->leaf) {
      std::vector<Point> merged;
      merged.reserve(old->points.size() + pts.size());
      auto a = old->points.begin();
      auto b = pts.begin();
      while (a != old->points.end() || b != pts.end()) {
        if (b == pts.end() || (a != old->points.end() && a->time < b->time)) {
          merged.push_back(*a++);
        } else {
          if (a != old->points.end() && a->time == b->time) ++a;  // last writer wins
          merged.push_back(*b++);
        }
      }
      return build(nullptr, pw, start, merged);
    }
    if (!old && (pts.size() <= kLeafCapacity || pw < kFanoutBits)) {
      return make_leaf(pw, start, std::vector<Point>(pts.begin(), pts.end()));
    }
    auto n = std::make_shared<Node>();
    n->pw = pw;
    n->start = start;
    n->leaf = false;
    if (old) {
      n->child = old->child;
      n->child_sum = old->child_sum;
    }
    std::size_t i = 0;
    while (i < pts.size()) {
      const std::size_t slot = n->slot(to_u(pts[i].time));
      std::size_t j = i;
      while (j < pts.size() && n->slot(to_u(pts[j].time)) == slot) ++j;
      n->child[slot] = build(n->child[slot].get(), pw - kFanoutBits, n->child_start(slot), pts.subspan(i, j - i));
      n->child_sum[slot] = n->child[slot]->total;
      i = j;
    }
    for (const auto& s : n->child_sum) n->total.merge(s);
    persist(*n);
    return n;
  }

  // ---- lookups ----

  Stream& stream(const StreamKey& key) const {
    std::shared_lock lock(streams_mu);
    auto it = streams.find(key);
    if (it == streams.end()) throw Error(ErrorCode::NotFound, "no stream '" + key.str() + "'");
    return *it->second;
  }

  NodePtr root(const StreamKey& key, std::optional<Version> version) const {
    Stream& s = stream(key);
    std::shared_lock lock(s.versions_mu);
    const Version v = version.value_or(s.roots.size() - 1);
    if (v >= s.roots.size()) {
      throw Error(ErrorCode::NotFound, "stream '" + key.str() + "' has no version " + std::to_string(v));
    }
    return s.roots[v];
  }
};

namespace {

void collect(const Node* n, u128 lo, u128 hi, std::vector<Point>& out) {
  if (!n) return;
  const u128 s = n->start, e = u128{n->start} + width(n->pw);
  if (e <= lo || s >= hi) return;
  if (n->leaf) {
    for (const Point& p : n->points) {
      const u128 u = to_u(p.time);
      if (u >= lo && u < hi) out.push_back(p);
    }
    return;
  }
  for (std::size_t i = 0; i < kFanout; ++i) collect(n->child[i].get(), lo, hi, out);
}

struct WindowGrid {
  u128 lo, hi;  // aligned, u-space
  int pw;
  std::vector<Summary> acc;

  Summary* at(u128 u) {
    if (u < lo || u >= hi) return nullptr;
    return &acc[static_cast<std::size_t>((u - lo) >> pw)];
  }
};

void accumulate(const Node* n, WindowGrid& g) {
  if (!n) return;
  const u128 s = n->start, e = u128{n->start} + width(n->pw);
  if (e <= g.lo || s >= g.hi) return;
  if (n->pw <= g.pw) {
    if (Summary* w = g.at(s)) w->merge(n->total);
    return;
  }
  if (n->leaf) {
    for (const Point& p : n->points)
      if (Summary* w = g.at(to_u(p.time))) w->add(p.value);
    return;
  }
  const int cpw = n->pw - kFanoutBits;
  for (std::size_t i = 0; i < kFanout; ++i) {
    if (!n->child[i]) continue;
    if (cpw <= g.pw) {
      if (Summary* w = g.at(n->child_start(i))) w->merge(n->child_sum[i]);
    } else {
      accumulate(n->child[i].get(), g);
    }
  }
}

void diff(const Node* a, const Node* b, int qpw, std::vector<std::uint64_t>& windows) {
  if (a == b) return;
  if (a && b && !a->leaf && !b->leaf) {
    for (std::size_t i = 0; i < kFanout; ++i) diff(a->child[i].get(), b->child[i].get(), qpw, windows);
    return;
  }
  std::vector<Point> pa, pb;
  collect(a, 0, width(kRootPointwidth), pa);
  collect(b, 0, width(kRootPointwidth), pb);
  const std::uint64_t mask = ~((std::uint64_t{1} << qpw) - 1);
  auto emit = [&](std::int64_t t) {
    const std::uint64_t w = to_u(t) & mask;
    if (windows.empty() || windows.back() != w) windows.push_back(w);
  };
  auto x = pa.begin();
  auto y = pb.begin();
  while (x != pa.end() || y != pb.end()) {
    if (y == pb.end() || (x != pa.end() && x->time < y->time)) {
      emit((x++)->time);
    } else if (x == pa.end() || y->time < x->time) {
      emit((y++)->time);
    } else {
      if (std::bit_cast<std::uint64_t>(x->value) != std::bit_cast<std::uint64_t>(y->value)) emit(x->time);
      ++x;
      ++y;
    }
  }
}

const Point* first_point(const Node* n) {
  if (!n) return nullptr;
  if (n->leaf) return n->points.empty() ? nullptr : &n->points.front();
  for (std::size_t i = 0; i < kFanout; ++i)
    if (const Point* p = first_point(n->child[i].get())) return p;
  return nullptr;
}

const Point* last_point(const Node* n) {
  if (!n) return nullptr;
  if (n->leaf) return n->points.empty() ? nullptr : &n->points.back();
  for (std::size_t i = kFanout; i-- > 0;)
    if (const Point* p = last_point(n->child[i].get())) return p;
  return nullptr;
}

void check_pointwidth(int pw) {
  if (pw < 0 || pw > kMaxQueryPointwidth) throw Error(ErrorCode::InvalidPointwidth, "pointwidth must lie in [0, 62]");
}

}  // namespace

Store::Store(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Store::Store(Store&&) noexcept = default;
Store& Store::operator=(Store&&) noexcept = default;
Store::~Store() = default;

Store Store::in_memory() { return Store(std::make_unique<Impl>()); }

Store Store::open(const std::filesystem::path& dir) {
  auto impl = std::make_unique<Impl>();
  std::filesystem::create_directories(dir);
  const auto file = dir / "segments.log";
  const bool fresh = !std::filesystem::exists(file) || std::filesystem::file_size(file) == 0;
  if (!fresh) impl->replay(file);
  impl->log.open(file, std::ios::binary | std::ios::app);
  if (!impl->log) throw Error(ErrorCode::StorageCorrupt, "cannot open " + file.string() + " for append");
  if (fresh) {
    std::string header(kMagic, 8);
    put(header, kFormatVersion);
    put(header, std::uint32_t{0});
    impl->log.write(header.data(), static_cast<std::streamsize>(header.size()));
    impl->log.flush();
  }
  impl->dir = dir;
  return Store(std::move(impl));
}

Version Store::insert(const StreamKey& stream, std::span<const Point> points) {
  std::vector<Point> batch(points.begin(), points.end());
  std::stable_sort(batch.begin(), batch.end(), [](const Point& a, const Point& b) { return a.time < b.time; });
  for (std::size_t i = 1; i < batch.size(); ++i) {
    if (batch[i].time == batch[i - 1].time) {
      throw Error(ErrorCode::BatchConflict, "duplicate timestamp " + std::to_string(batch[i].time) + " in batch");
    }
  }
  Impl::Stream* s;
  {
    std::unique_lock lock(impl_->streams_mu);
    auto& slot = impl_->streams[stream];
    if (!slot) slot = std::make_unique<Impl::Stream>();
    s = slot.get();
  }
  std::lock_guard writer(s->writer);
  NodePtr base;
  {
    std::shared_lock lock(s->versions_mu);
    base = s->roots.back();
  }
  NodePtr next = batch.empty() ? base : impl_->build(base.get(), kRootPointwidth, 0, batch);
  Version v;
  {
    std::shared_lock lock(s->versions_mu);
    v = s->roots.size();
  }
  impl_->persist_root(stream, v, next);
  std::unique_lock lock(s->versions_mu);
  s->roots.push_back(std::move(next));
  return v;
}

std::vector<Point> Store::query_raw(const StreamKey& stream, std::int64_t t0, std::int64_t t1,
                                    std::optional<Version> version) const {
  if (t0 > t1) throw Error(ErrorCode::InvalidArgument, "query range must satisfy t0 <= t1");
  const NodePtr root = impl_->root(stream, version);
  std::vector<Point> out;
  if (t0 < t1) collect(root.get(), to_u(t0), to_u(t1), out);
  return out;
}

std::vector<StatPoint> Store::query_windows(const StreamKey& stream, std::int64_t t0, std::int64_t t1, int pointwidth,
                                           std::optional<Version> version) const {
  check_pointwidth(pointwidth);
  if (t0 > t1) throw Error(ErrorCode::InvalidArgument, "query range must satisfy t0 <= t1");
  const NodePtr root = impl_->root(stream, version);
  WindowGrid g;
  g.pw = pointwidth;
  g.lo = to_u(align_down(t0, pointwidth));
  const u128 hi_raw = to_u(t1);
  g.hi = ((hi_raw + width(pointwidth) - 1) >> pointwidth) << pointwidth;
  if (t0 == t1) g.hi = g.lo;
  const u128 n = (g.hi - g.lo) >> pointwidth;
  if (n > kMaxWindows) {
    throw Error(ErrorCode::InvalidArgument, "query spans " + std::to_string(static_cast<std::uint64_t>(n)) +
                                                " windows; use a coarser pointwidth");
  }
  g.acc.resize(static_cast<std::size_t>(n));
  accumulate(root.get(), g);
  std::vector<StatPoint> out(g.acc.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    StatPoint& sp = out[i];
    sp.window_start = to_t(static_cast<std::uint64_t>(g.lo + (u128{i} << pointwidth)));
    sp.pointwidth = pointwidth;
    sp.count = g.acc[i].count;
    if (sp.count > 0) {
      sp.min = g.acc[i].min;
      sp.max = g.acc[i].max;
      sp.mean = g.acc[i].sum / static_cast<double>(sp.count);
    }
  }
  return out;
}

std::vector<TimeRange> Store::changed_ranges(const StreamKey& stream, Version a, Version b, int pointwidth) const {
  check_pointwidth(pointwidth);
  if (a > b) throw Error(ErrorCode::InvalidArgument, "changed_ranges needs version a <= b");
  const NodePtr ra = impl_->root(stream, a);
  const NodePtr rb = impl_->root(stream, b);
  std::vector<std::uint64_t> windows;
  diff(ra.get(), rb.get(), pointwidth, windows);
  std::sort(windows.begin(), windows.end());
  windows.erase(std::unique(windows.begin(), windows.end()), windows.end());
  std::vector<TimeRange> out;
  const u128 w = width(pointwidth);
  for (std::uint64_t u : windows) {
    const u128 end_u = u128{u} + w;
    const std::int64_t start = to_t(u);
    // The final window of the axis ends at 2^64 in u-space; clamp to int64 max.
    const std::int64_t end = end_u >= width(64) ? std::numeric_limits<std::int64_t>::max()
                                                : to_t(static_cast<std::uint64_t>(end_u));
    if (!out.empty() && out.back().end == start) {
      out.back().end = end;
    } else {
      out.push_back({start, end});
    }
  }
  return out;
}

std::optional<TimeRange> Store::extent(const StreamKey& stream, std::optional<Version> version) const {
  const NodePtr root = impl_->root(stream, version);
  const Point* first = first_point(root.get());
  if (!first) return std::nullopt;
  return TimeRange{first->time, last_point(root.get())->time + 1};
}

Version Store::latest_version(const StreamKey& stream) const {
  auto& s = impl_->stream(stream);
  std::shared_lock lock(s.versions_mu);
  return s.roots.size() - 1;
}

bool Store::contains(const StreamKey& stream) const {
  std::shared_lock lock(impl_->streams_mu);
  return impl_->streams.count(stream) != 0;
}

std::vector<StreamKey> Store::streams() const {
  std::shared_lock lock(impl_->streams_mu);
  std::vector<StreamKey> out;
  for (const auto& [k, _] : impl_->streams) out.push_back(k);
  return out;
}

std::optional<std::filesystem::path> Store::directory() const { return impl_->dir; }

}  // namespace upmu::store
