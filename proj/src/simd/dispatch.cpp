#include <atomic>

#include "im2tex/simd/kernels.hpp"

namespace im2tex::simd {
namespace {

const KernelTable* best_available() {
  if (const KernelTable* t = avx2_kernels()) return t;
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& active() {
  static std::atomic<const KernelTable*> table{best_available()};
  return table;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "unknown";
}

const KernelTable& kernels() { return *active().load(std::memory_order_acquire); }

Isa force_isa(Isa isa) {
  const KernelTable* table = &scalar_kernels();
  if (isa == Isa::avx2) {
    if (const KernelTable* t = avx2_kernels()) table = t;
  }
  active().store(table, std::memory_order_release);
  return table->isa;
}

}  // namespace im2tex::simd
