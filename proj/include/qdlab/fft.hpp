#ifndef QDLAB_FFT_HPP
#define QDLAB_FFT_HPP

#include <fftw3.h>

#include <map>
#include <mutex>
#include <stdexcept>
#include <utility>

#include "qdlab/grid.hpp"

namespace qdlab {

namespace detail {

// FFTW planning is not thread-safe; plan creation is serialized and cached.
// Plans are created FFTW_UNALIGNED so they can execute on any buffer.
class FftPlans {
  public:
    static FftPlans& instance() {
        static FftPlans p;
        return p;
    }

    fftw_plan get(int L, int sign) {
        std::lock_guard<std::mutex> lock(mu_);
        auto key = std::make_pair(L, sign);
        auto it = plans_.find(key);
        if (it != plans_.end()) return it->second;
        std::vector<Complex> buf(static_cast<std::size_t>(L) * L * L);
        auto* p = reinterpret_cast<fftw_complex*>(buf.data());
        fftw_plan plan = fftw_plan_dft_3d(L, L, L, p, p, sign,
                                          FFTW_ESTIMATE | FFTW_UNALIGNED);
        if (!plan) throw std::runtime_error("fftw planning failed");
        plans_[key] = plan;
        return plan;
    }

  private:
    std::mutex mu_;
    std::map<std::pair<int, int>, fftw_plan> plans_;
};

inline void execute_inplace(std::vector<Complex>& v, int L, int sign) {
    fftw_plan plan = FftPlans::instance().get(L, sign);
    auto* p = reinterpret_cast<fftw_complex*>(v.data());
    fftw_execute_dft(plan, p, p);
}

}  // namespace detail

// f_hat(p) = delta^d sum_x exp(-2 pi i p.x) f(x), p on the dual grid.
inline ComplexField fourier_forward(const ComplexField& f) {
    if (f.rep != Representation::position)
        throw std::invalid_argument("fourier_forward: field must be in position representation");
    ComplexField out = f;
    detail::execute_inplace(out.values, f.grid.L, FFTW_FORWARD);
    out.scale_by(f.grid.position_weight());
    out.rep = Representation::momentum;
    return out;
}

// f(x) = sum_p f_hat(p) exp(2 pi i p.x) / (delta L)^d, exact inverse on the grid.
inline ComplexField fourier_inverse(const ComplexField& f) {
    if (f.rep != Representation::momentum)
        throw std::invalid_argument("fourier_inverse: field must be in momentum representation");
    ComplexField out = f;
    detail::execute_inplace(out.values, f.grid.L, FFTW_BACKWARD);
    out.scale_by(f.grid.momentum_weight());
    out.rep = Representation::position;
    return out;
}

}  // namespace qdlab

#endif
