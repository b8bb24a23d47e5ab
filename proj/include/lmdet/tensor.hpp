#ifndef LMDET_TENSOR_HPP
#define LMDET_TENSOR_HPP

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <type_traits>
#include <vector>

#include "lmdet/util.hpp"

namespace lmdet {

// Allocator for tensor storage: 64-byte aligned and default-initializing
// (trivially-constructible elements stay uninitialized; op outputs are fully
// overwritten right after allocation). The fixed alignment keeps Eigen's
// vectorized kernels on one code path regardless of heap addresses, which
// makes results byte-reproducible across reruns.
template <class T>
class uninit_allocator {
  public:
    using value_type = T;
    template <class U>
    struct rebind {
        using other = uninit_allocator<U>;
    };
    uninit_allocator() noexcept = default;
    template <class U>
    uninit_allocator(const uninit_allocator<U>&) noexcept {}

    T* allocate(size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(64)));
    }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, std::align_val_t(64)); }

    template <class U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    template <class U>
    bool operator==(const uninit_allocator<U>&) const noexcept {
        return true;
    }
    template <class U>
    bool operator!=(const uninit_allocator<U>&) const noexcept {
        return false;
    }
};

struct NoInit {};

// Dense row-major tensor. Rank is dynamic; the nn code uses {N,C,H,W},
// heatmaps use {H,W}.
template <class S>
struct TensorT {
    std::vector<int> shape;
    std::vector<S, uninit_allocator<S>> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> shp) : shape(std::move(shp)) {
        data.resize(count(shape));
        std::fill(data.begin(), data.end(), S(0));
    }
    TensorT(std::vector<int> shp, NoInit) : shape(std::move(shp)) { data.resize(count(shape)); }
    TensorT(std::vector<int> shp, std::initializer_list<S> d)
        : shape(std::move(shp)), data(d.begin(), d.end()) {
        if (data.size() != count(shape)) throw InvalidInput("tensor data/shape mismatch");
    }
    template <class Iterable>
    TensorT(std::vector<int> shp, const Iterable& d) : shape(std::move(shp)), data(d.begin(), d.end()) {
        if (data.size() != count(shape)) throw InvalidInput("tensor data/shape mismatch");
    }

    static size_t count(const std::vector<int>& shp) {
        size_t n = 1;
        for (int d : shp) {
            if (d < 0) throw InvalidInput("negative tensor dimension");
            n *= size_t(d);
        }
        return n;
    }

    size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[size_t(i)]; }
    int rank() const { return int(shape.size()); }

    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }

    S& at(int i, int j) { return data[size_t(i) * shape[1] + j]; }
    S at(int i, int j) const { return data[size_t(i) * shape[1] + j]; }
    S& at(int c, int i, int j) { return data[(size_t(c) * shape[1] + i) * shape[2] + j]; }
    S at(int c, int i, int j) const { return data[(size_t(c) * shape[1] + i) * shape[2] + j]; }
    S& at(int n, int c, int i, int j) {
        return data[((size_t(n) * shape[1] + c) * size_t(shape[2]) + i) * shape[3] + j];
    }
    S at(int n, int c, int i, int j) const {
        return data[((size_t(n) * shape[1] + c) * size_t(shape[2]) + i) * shape[3] + j];
    }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    template <class T>
    TensorT<T> cast() const {
        TensorT<T> out(shape, NoInit{});
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = T(data[i]);
        return out;
    }
};

using FTensor = TensorT<float>;
using DTensor = TensorT<double>;

// Probability field over H×W for one landmark.
using Heatmap = TensorT<double>;

}  // namespace lmdet

#endif
