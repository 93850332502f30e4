#pragma once

#include <cmath>
#include <cstdint>

namespace mfjump {

// Counter-based stream: the state is a pure function of the key words, so a
// draw for (seed, particle, step, atom) is identical no matter which worker
// asks for it or in what order.
class CounterRng {
  public:
    CounterRng(uint64_t seed, uint64_t k1 = 0, uint64_t k2 = 0, uint64_t k3 = 0,
               uint64_t k4 = 0) {
        state_ = mix(seed + 0x9e3779b97f4a7c15ULL);
        state_ = mix(state_ ^ mix(k1 + 0xbf58476d1ce4e5b9ULL));
        state_ = mix(state_ ^ mix(k2 + 0x94d049bb133111ebULL));
        state_ = mix(state_ ^ mix(k3 + 0xd6e8feb86659fd93ULL));
        state_ = mix(state_ ^ mix(k4 + 0xa5a5a5a5a5a5a5a5ULL));
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    // uniform on (0,1), never returns 0 or 1
    double next_uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // standard normal via Box-Muller; draws come in pairs internally
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_uniform();
        double u2 = next_uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Poisson count by inversion of exponential waiting times (small mean)
    int next_poisson(double mean) {
        if (mean <= 0.0) return 0;
        double limit = std::exp(-mean);
        double prod = next_uniform();
        int k = 0;
        while (prod > limit) {
            prod *= next_uniform();
            ++k;
        }
        return k;
    }

  private:
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }

    uint64_t state_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// stream tags keep the purpose-separated substreams from colliding
enum class StreamTag : uint64_t {
    brownian = 1,
    jump = 2,
    pinned_brownian = 3,
    pinned_jump = 4,
    init = 5,
    probe = 6,
};

}  // namespace mfjump
