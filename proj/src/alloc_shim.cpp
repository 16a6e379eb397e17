// Global operator new/delete overrides that report every allocation to the
// benchmark's tracker. Linked only into binaries that want real peak-memory
// numbers; everything else falls back to the estimate path.
//
// Each block is prefixed with a 16-byte header holding its size, which keeps
// the usual 16-byte malloc alignment intact. Over-aligned allocations keep
// using the default aligned operator new and stay untracked; the matrices this
// project measures all come through the plain forms.

#include <cstdlib>
#include <new>

#include "lavo/bench.hpp"

namespace {

constexpr std::size_t kHeader = 16;

struct Activate {
  Activate() { lavo::bench::alloctrack::mark_active(); }
} activate_tracking;

void* tracked_alloc(std::size_t sz) {
  void* raw = std::malloc(sz + kHeader);
  if (raw == nullptr) return nullptr;
  *static_cast<std::size_t*>(raw) = sz;
  lavo::bench::alloctrack::on_alloc(sz);
  return static_cast<char*>(raw) + kHeader;
}

void tracked_free(void* p) {
  if (p == nullptr) return;
  char* raw = static_cast<char*>(p) - kHeader;
  lavo::bench::alloctrack::on_free(*reinterpret_cast<std::size_t*>(raw));
  std::free(raw);
}

}  // namespace

void* operator new(std::size_t sz) {
  void* p = tracked_alloc(sz);
  if (p == nullptr) throw std::bad_alloc();
  return p;
}

void* operator new[](std::size_t sz) { return ::operator new(sz); }

void* operator new(std::size_t sz, const std::nothrow_t&) noexcept {
  return tracked_alloc(sz);
}

void* operator new[](std::size_t sz, const std::nothrow_t&) noexcept {
  return tracked_alloc(sz);
}

void operator delete(void* p) noexcept { tracked_free(p); }
void operator delete[](void* p) noexcept { tracked_free(p); }
void operator delete(void* p, std::size_t) noexcept { tracked_free(p); }
void operator delete[](void* p, std::size_t) noexcept { tracked_free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { tracked_free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { tracked_free(p); }
