#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dynrep/core/rng.hpp"
#include "dynrep/sim/spectral.hpp"

namespace dynrep {

struct ParamRange {
  std::string name;
  double lo = 0.0, hi = 0.0;
  bool log_scale = false;
};

struct SystemSpec {
  std::string system;
  int64_t H = 32, W = 32;
  int64_t T = 32;          // saved frames
  double dt = 0.0;         // solver step
  int64_t save_every = 1;  // solver steps between saved frames
  std::array<ParamRange, 2> param_ranges;
  std::string init = "random";  // random | uniform | taylor_green
  double init_amplitude = 1.0;

  void validate() const {
    if (H < 2 || W < 2 || T < 1 || dt <= 0.0 || save_every < 1)
      throw Error(ErrCode::value, "system spec: bad grid/time settings");
    if (!is_pow2(H) || !is_pow2(W))
      throw Error(ErrCode::value, "system spec: H and W must be powers of two");
    for (const auto& r : param_ranges) {
      if (r.name.empty() || !(r.lo <= r.hi))
        throw Error(ErrCode::value,
                    "system spec: empty range for parameter '" + r.name + "'");
      if (r.log_scale && r.lo <= 0.0)
        throw Error(ErrCode::value,
                    "system spec: log range for '" + r.name + "' needs lo > 0");
    }
  }
};

inline SystemSpec default_spec(const std::string& system) {
  SystemSpec s;
  s.system = system;
  if (system == "advdiff") {
    s.dt = 0.01;
    s.save_every = 4;
    s.param_ranges = {ParamRange{"velocity", 0.2, 1.0, false},
                      ParamRange{"kappa", 1e-3, 2e-2, true}};
  } else if (system == "grayscott") {
    s.dt = 1.0;
    s.save_every = 80;
    s.param_ranges = {ParamRange{"feed", 0.01, 0.08, false},
                      ParamRange{"kill", 0.04, 0.07, false}};
  } else if (system == "shearvort") {
    s.dt = 0.05;
    s.save_every = 4;
    s.param_ranges = {ParamRange{"inv_nu", 50.0, 500.0, true},
                      ParamRange{"inv_kappa_s", 50.0, 500.0, true}};
  } else {
    throw Error(ErrCode::value, "unknown system '" + system + "'");
  }
  return s;
}

struct Trajectory {
  std::string system;
  int64_t T = 0, C = 0, H = 0, W = 0;
  std::vector<std::string> channels;
  std::vector<std::pair<std::string, double>> params;
  uint64_t seed = 0;
  double frame_dt = 0.0;
  std::vector<double> frames;  // [T, C, H, W]

  size_t frame_offset(int64_t t, int64_t c) const {
    return static_cast<size_t>((t * C + c) * H * W);
  }
};

inline void check_frame_finite(const std::vector<double>& frame,
                               const std::string& system, int64_t t) {
  for (double v : frame)
    if (!std::isfinite(v))
      throw Error(ErrCode::numeric, system + ": non-finite field at frame " +
                                        std::to_string(t) +
                                        " (unstable parameters or dt)");
}

// i.i.d. draws from the system's two parameter ranges.
inline std::vector<std::array<double, 2>> sample_parameters(
    const SystemSpec& spec, int64_t n, uint64_t seed) {
  spec.validate();
  if (n < 1) throw Error(ErrCode::value, "sample_parameters: n must be >= 1");
  Rng rng(seed);
  std::vector<std::array<double, 2>> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    std::array<double, 2> draw{};
    for (size_t j = 0; j < 2; ++j) {
      const auto& r = spec.param_ranges[j];
      draw[j] = r.log_scale ? rng.log_uniform(r.lo, r.hi)
                            : rng.uniform(r.lo, r.hi);
    }
    out.push_back(draw);
  }
  return out;
}

namespace detail {

// Smooth random field: white noise low-pass filtered with a 1/(1+|k|^2)
// envelope, zero mean, unit max amplitude, scaled by amp.
inline std::vector<double> random_smooth_field(int64_t h, int64_t w, Rng& rng,
                                               double amp, int64_t kmax = 6) {
  std::vector<cplx> spec(static_cast<size_t>(h * w), cplx(0, 0));
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      double n = rng.normal();  // one draw per mode keeps seeding stable
      int64_t ky = wavenumber(i, h), kx = wavenumber(j, w);
      double k2 = static_cast<double>(kx * kx + ky * ky);
      if (k2 == 0.0 || std::abs(kx) > kmax || std::abs(ky) > kmax) continue;
      spec[static_cast<size_t>(i * w + j)] = cplx(n / (1.0 + k2), 0.0);
    }
  // to_field drops the imaginary part, i.e. keeps the spectrum's Hermitian part
  std::vector<double> f = to_field(spec, h, w);
  double peak = 0.0;
  for (double v : f) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) return f;
  for (double& v : f) v *= amp / peak;
  return f;
}

inline size_t wrap_idx(int64_t i, int64_t n) {
  return static_cast<size_t>(((i % n) + n) % n);
}

}  // namespace detail

// Constant-velocity advection (along x) with diffusion on the unit periodic
// square, integrated exactly mode-by-mode: every saved frame comes from the
// initial spectrum with the integrating factor at that time, so the mean
// mode is preserved to the bit.
inline Trajectory simulate_advdiff(double velocity, double kappa,
                                   const SystemSpec& spec, uint64_t seed) {
  spec.validate();
  double dx = 1.0 / static_cast<double>(spec.W);
  if (kappa < 0.0)
    throw Error(ErrCode::value, "advdiff: negative diffusivity");
  double diff_bound = kappa * spec.dt / (dx * dx);
  if (diff_bound > 0.25)
    throw Error(ErrCode::value,
                "advdiff: diffusion bound kappa*dt/dx^2 = " +
                    std::to_string(diff_bound) + " exceeds 0.25");
  double adv_bound = std::abs(velocity) * spec.dt / dx;
  if (adv_bound > 1.0)
    throw Error(ErrCode::value, "advdiff: advection bound |u|*dt/dx = " +
                                    std::to_string(adv_bound) + " exceeds 1");

  Rng rng(seed);
  std::vector<double> field;
  if (spec.init == "uniform")
    field.assign(static_cast<size_t>(spec.H * spec.W), 1.0);
  else
    field = detail::random_smooth_field(spec.H, spec.W, rng,
                                        spec.init_amplitude);
  std::vector<cplx> spectrum = to_spectrum(field, spec.H, spec.W);

  Trajectory traj;
  traj.system = "advdiff";
  traj.T = spec.T;
  traj.C = 1;
  traj.H = spec.H;
  traj.W = spec.W;
  traj.channels = {"c"};
  traj.params = {{spec.param_ranges[0].name, velocity},
                 {spec.param_ranges[1].name, kappa}};
  traj.seed = seed;
  traj.frame_dt = spec.dt * static_cast<double>(spec.save_every);
  traj.frames.resize(static_cast<size_t>(spec.T * spec.H * spec.W));

  std::vector<cplx> evolved(spectrum.size());
  for (int64_t f = 0; f < spec.T; ++f) {
    double t = traj.frame_dt * static_cast<double>(f);
    for (int64_t i = 0; i < spec.H; ++i)
      for (int64_t j = 0; j < spec.W; ++j) {
        double kx = 2.0 * M_PI * static_cast<double>(wavenumber(j, spec.W));
        double ky = 2.0 * M_PI * static_cast<double>(wavenumber(i, spec.H));
        double decay = std::exp(-kappa * (kx * kx + ky * ky) * t);
        double phase = -velocity * kx * t;
        evolved[static_cast<size_t>(i * spec.W + j)] =
            spectrum[static_cast<size_t>(i * spec.W + j)] * decay *
            cplx(std::cos(phase), std::sin(phase));
      }
    std::vector<double> frame = to_field(evolved, spec.H, spec.W);
    check_frame_finite(frame, traj.system, f);
    std::copy(frame.begin(), frame.end(),
              traj.frames.begin() + static_cast<int64_t>(traj.frame_offset(f, 0)));
  }
  return traj;
}

// Gray-Scott reaction-diffusion, explicit FTCS on a unit-spaced grid with
// fixed diffusivities Du=0.16, Dv=0.08. u=1, v=0 is an exact fixed point of
// the discrete update, since the 5-point Laplacian vanishes on constants.
inline Trajectory simulate_grayscott(double feed, double kill,
                                     const SystemSpec& spec, uint64_t seed) {
  spec.validate();
  const double Du = 0.16, Dv = 0.08;
  if (feed < 0.01 || feed > 0.08 || kill < 0.04 || kill > 0.07)
    throw Error(ErrCode::value,
                "grayscott: parameters F=" + std::to_string(feed) + " k=" +
                    std::to_string(kill) + " outside supported region");
  if (Du * spec.dt > 0.25)
    throw Error(ErrCode::value, "grayscott: diffusion bound Du*dt/dx^2 = " +
                                    std::to_string(Du * spec.dt) +
                                    " exceeds 0.25");

  int64_t h = spec.H, w = spec.W;
  size_t cells = static_cast<size_t>(h * w);
  std::vector<double> u(cells, 1.0), v(cells, 0.0);

  Rng rng(seed);
  if (spec.init != "uniform" && spec.init_amplitude > 0.0) {
    double amp = spec.init_amplitude;
    int64_t nspots = 3 + rng.uniform_int(0, 4);
    for (int64_t s = 0; s < nspots; ++s) {
      int64_t ch = rng.uniform_int(0, h), cw = rng.uniform_int(0, w);
      for (int64_t dy = -2; dy <= 2; ++dy)
        for (int64_t dx2 = -2; dx2 <= 2; ++dx2) {
          size_t i = detail::wrap_idx(ch + dy, h) * static_cast<size_t>(w) +
                     detail::wrap_idx(cw + dx2, w);
          u[i] = 1.0 - 0.5 * amp;
          v[i] = 0.25 * amp;
        }
    }
    for (size_t i = 0; i < cells; ++i) {
      u[i] += 0.02 * amp * (rng.uniform() - 0.5);
      v[i] += 0.02 * amp * rng.uniform() * (v[i] > 0.0 ? 1.0 : 0.0);
    }
  }

  Trajectory traj;
  traj.system = "grayscott";
  traj.T = spec.T;
  traj.C = 2;
  traj.H = h;
  traj.W = w;
  traj.channels = {"u", "v"};
  traj.params = {{spec.param_ranges[0].name, feed},
                 {spec.param_ranges[1].name, kill}};
  traj.seed = seed;
  traj.frame_dt = spec.dt * static_cast<double>(spec.save_every);
  traj.frames.resize(static_cast<size_t>(spec.T) * 2 * cells);

  std::vector<double> un(cells), vn(cells);
  auto save = [&](int64_t f) {
    check_frame_finite(u, traj.system, f);
    check_frame_finite(v, traj.system, f);
    std::copy(u.begin(), u.end(),
              traj.frames.begin() + static_cast<int64_t>(traj.frame_offset(f, 0)));
    std::copy(v.begin(), v.end(),
              traj.frames.begin() + static_cast<int64_t>(traj.frame_offset(f, 1)));
  };
  save(0);
  for (int64_t f = 1; f < spec.T; ++f) {
    for (int64_t s = 0; s < spec.save_every; ++s) {
      for (int64_t i = 0; i < h; ++i) {
        size_t up = detail::wrap_idx(i - 1, h) * static_cast<size_t>(w);
        size_t dn = detail::wrap_idx(i + 1, h) * static_cast<size_t>(w);
        size_t rw = static_cast<size_t>(i) * static_cast<size_t>(w);
        for (int64_t j = 0; j < w; ++j) {
          size_t lf = detail::wrap_idx(j - 1, w), rt = detail::wrap_idx(j + 1, w);
          size_t c = rw + static_cast<size_t>(j);
          double lap_u = u[up + static_cast<size_t>(j)] + u[dn + static_cast<size_t>(j)] +
                         u[rw + lf] + u[rw + rt] - 4.0 * u[c];
          double lap_v = v[up + static_cast<size_t>(j)] + v[dn + static_cast<size_t>(j)] +
                         v[rw + lf] + v[rw + rt] - 4.0 * v[c];
          double uvv = u[c] * v[c] * v[c];
          un[c] = u[c] + spec.dt * (Du * lap_u - uvv + feed * (1.0 - u[c]));
          vn[c] = v[c] + spec.dt * (Dv * lap_v + uvv - (feed + kill) * v[c]);
        }
      }
      u.swap(un);
      v.swap(vn);
    }
    save(f);
  }
  return traj;
}

namespace detail {

// Pseudo-spectral 2D incompressible vorticity solver state on [0,2pi)^2:
// integrating-factor Heun steps with 2/3-rule dealiasing.
struct VorticitySolver {
  int64_t h, w;
  double nu, kappa_s, dt;
  std::vector<double> k2;           // |k|^2 per mode
  std::vector<uint8_t> keep;        // dealias mask
  std::vector<cplx> wh, th;         // vorticity / tracer spectra

  VorticitySolver(int64_t h_, int64_t w_, double nu_, double ks_, double dt_)
      : h(h_), w(w_), nu(nu_), kappa_s(ks_), dt(dt_) {
    k2.resize(static_cast<size_t>(h * w));
    keep.resize(static_cast<size_t>(h * w));
    int64_t cut_h = h / 3, cut_w = w / 3;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        int64_t ky = wavenumber(i, h), kx = wavenumber(j, w);
        size_t m = static_cast<size_t>(i * w + j);
        k2[m] = static_cast<double>(kx * kx + ky * ky);
        keep[m] = (std::abs(kx) <= cut_w && std::abs(ky) <= cut_h) ? 1 : 0;
      }
  }

  void dealias(std::vector<cplx>& s) const {
    for (size_t m = 0; m < s.size(); ++m)
      if (!keep[m]) s[m] = cplx(0, 0);
  }

  // -(u . grad) applied to a spectrum, with velocities induced by wspec.
  void advect(const std::vector<cplx>& wspec, const std::vector<cplx>& sspec,
              std::vector<cplx>& out) const {
    size_t n = static_cast<size_t>(h * w);
    std::vector<cplx> uh(n), vh(n), sx(n), sy(n);
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        size_t m = static_cast<size_t>(i * w + j);
        double ky = static_cast<double>(wavenumber(i, h));
        double kx = static_cast<double>(wavenumber(j, w));
        cplx psi = k2[m] > 0.0 ? wspec[m] / k2[m] : cplx(0, 0);
        uh[m] = cplx(0, 1) * ky * psi;
        vh[m] = cplx(0, -1) * kx * psi;
        sx[m] = cplx(0, 1) * kx * sspec[m];
        sy[m] = cplx(0, 1) * ky * sspec[m];
      }
    fft2_inplace(uh, h, w, true);
    fft2_inplace(vh, h, w, true);
    fft2_inplace(sx, h, w, true);
    fft2_inplace(sy, h, w, true);
    out.resize(n);
    for (size_t m = 0; m < n; ++m)
      out[m] = cplx(-(uh[m].real() * sx[m].real() + vh[m].real() * sy[m].real()), 0.0);
    fft2_inplace(out, h, w, false);
    dealias(out);
  }

  void step() {
    size_t n = static_cast<size_t>(h * w);
    std::vector<cplx> k1w(n), k1t(n), k2w(n), k2t(n), wp(n), tp(n);
    advect(wh, wh, k1w);
    advect(wh, th, k1t);
    for (size_t m = 0; m < n; ++m) {
      double ew = std::exp(-nu * k2[m] * dt);
      double et = std::exp(-kappa_s * k2[m] * dt);
      wp[m] = ew * (wh[m] + dt * k1w[m]);
      tp[m] = et * (th[m] + dt * k1t[m]);
    }
    advect(wp, wp, k2w);
    advect(wp, tp, k2t);
    for (size_t m = 0; m < n; ++m) {
      double ew = std::exp(-nu * k2[m] * dt);
      double et = std::exp(-kappa_s * k2[m] * dt);
      wh[m] = ew * wh[m] + 0.5 * dt * (ew * k1w[m] + k2w[m]);
      th[m] = et * th[m] + 0.5 * dt * (et * k1t[m] + k2t[m]);
    }
  }
};

}  // namespace detail

// 2D incompressible shear flow in vorticity form plus a passive tracer,
// parameterized by the inverse viscosity and inverse tracer diffusivity.
inline Trajectory simulate_shearvort(double inv_nu, double inv_kappa_s,
                                     const SystemSpec& spec, uint64_t seed) {
  spec.validate();
  if (inv_nu <= 0.0 || inv_kappa_s <= 0.0)
    throw Error(ErrCode::value, "shearvort: inverse coefficients must be > 0");
  double nu = 1.0 / inv_nu, kappa_s = 1.0 / inv_kappa_s;
  int64_t h = spec.H, w = spec.W;
  size_t cells = static_cast<size_t>(h * w);

  Rng rng(seed);
  std::vector<double> omega(cells, 0.0), tracer(cells, 0.0);
  double amp = spec.init_amplitude;
  if (spec.init == "taylor_green") {
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        double x = 2.0 * M_PI * static_cast<double>(j) / static_cast<double>(w);
        double y = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(h);
        omega[static_cast<size_t>(i * w + j)] = amp * std::cos(x) * std::cos(y);
        tracer[static_cast<size_t>(i * w + j)] = amp * std::cos(x);
      }
  } else if (spec.init == "random" && amp > 0.0) {
    // opposing vorticity strips (a double shear layer) + mode noise
    double delta = M_PI / 8.0;
    std::vector<double> noise = detail::random_smooth_field(h, w, rng, 0.2 * amp);
    for (int64_t i = 0; i < h; ++i) {
      double y = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(h);
      double strip = std::exp(-0.5 * std::pow((y - M_PI / 2) / delta, 2)) -
                     std::exp(-0.5 * std::pow((y - 3 * M_PI / 2) / delta, 2));
      for (int64_t j = 0; j < w; ++j) {
        size_t m = static_cast<size_t>(i * w + j);
        omega[m] = amp * strip + noise[m];
        tracer[m] = amp * std::sin(y);
      }
    }
  }

  detail::VorticitySolver solver(h, w, nu, kappa_s, spec.dt);
  solver.wh = to_spectrum(omega, h, w);
  solver.th = to_spectrum(tracer, h, w);
  solver.dealias(solver.wh);
  solver.dealias(solver.th);

  Trajectory traj;
  traj.system = "shearvort";
  traj.T = spec.T;
  traj.C = 2;
  traj.H = h;
  traj.W = w;
  traj.channels = {"vorticity", "tracer"};
  traj.params = {{spec.param_ranges[0].name, inv_nu},
                 {spec.param_ranges[1].name, inv_kappa_s}};
  traj.seed = seed;
  traj.frame_dt = spec.dt * static_cast<double>(spec.save_every);
  traj.frames.resize(static_cast<size_t>(spec.T) * 2 * cells);

  for (int64_t f = 0; f < spec.T; ++f) {
    if (f > 0)
      for (int64_t s = 0; s < spec.save_every; ++s) solver.step();
    std::vector<double> wr = to_field(solver.wh, h, w);
    std::vector<double> tr = to_field(solver.th, h, w);
    check_frame_finite(wr, traj.system, f);
    check_frame_finite(tr, traj.system, f);
    std::copy(wr.begin(), wr.end(),
              traj.frames.begin() + static_cast<int64_t>(traj.frame_offset(f, 0)));
    std::copy(tr.begin(), tr.end(),
              traj.frames.begin() + static_cast<int64_t>(traj.frame_offset(f, 1)));
  }
  return traj;
}

// Dispatch on spec.system with parameters in range declaration order.
inline Trajectory simulate(const SystemSpec& spec,
                           const std::array<double, 2>& params, uint64_t seed) {
  if (spec.system == "advdiff")
    return simulate_advdiff(params[0], params[1], spec, seed);
  if (spec.system == "grayscott")
    return simulate_grayscott(params[0], params[1], spec, seed);
  if (spec.system == "shearvort")
    return simulate_shearvort(params[0], params[1], spec, seed);
  throw Error(ErrCode::value, "unknown system '" + spec.system + "'");
}

}  // namespace dynrep
