#include "nfrecon/phantom.hpp"

#include <cmath>
#include <numbers>

namespace nfrecon {
namespace {

// (e^{-x} - 1 + x) / x^2 without cancellation for small x.
double ramp_kernel(double x) {
  if (std::abs(x) < 1e-3) return 0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0;
  return (std::expm1(-x) + x) / (x * x);
}

// (1 - e^{-x}) / x
double decay_kernel(double x) {
  if (std::abs(x) < 1e-8) return 1.0 - 0.5 * x;
  return -std::expm1(-x) / x;
}

}  // namespace

bool Ellipse::contains(Point2 r) const {
  const double a = rotation_deg * std::numbers::pi / 180.0;
  const double dx = r.x - center.x;
  const double dy = r.y - center.y;
  const double u = dx * std::cos(a) + dy * std::sin(a);
  const double v = -dx * std::sin(a) + dy * std::cos(a);
  return (u * u) / (semi_x * semi_x) + (v * v) / (semi_y * semi_y) <= 1.0;
}

void ToftsTac::validate(double horizon) const {
  if (!(k_trans >= 0.0) || !(k_ep > 0.0) || !(plasma_decay > 0.0) || !(bolus_duration > 0.0)) {
    throw Error("invalid_phantom", "Tofts rates and bolus duration must be positive");
  }
  if (!(t_injection >= 0.0) || !(t_injection + bolus_duration < horizon)) {
    throw Error("invalid_phantom", "injection must finish before the horizon");
  }
}

double plasma_input(const ToftsTac& tac, double t) {
  const double t1 = tac.t_injection + tac.bolus_duration;
  if (t < tac.t_injection) return 0.0;
  if (t < t1) return tac.plasma_peak * (t - tac.t_injection) / tac.bolus_duration;
  return tac.plasma_peak * std::exp(-tac.plasma_decay * (t - t1));
}

double tofts_tac(const ToftsTac& tac, double t, double horizon) {
  if (!(t >= 0.0 && t <= horizon)) {
    throw Error("out_of_range", "time " + std::to_string(t) + " s outside [0, " + std::to_string(horizon) + "]");
  }
  if (t <= tac.t_injection || tac.k_trans == 0.0) return 0.0;
  const double k = tac.k_ep;
  const double t0 = tac.t_injection;
  const double t1 = t0 + tac.bolus_duration;
  const double slope = tac.plasma_peak / tac.bolus_duration;

  // Ramp part over [t0, min(t, t1)]: slope * int_0^U u e^{-k (t - t0 - u)} du.
  const double u_end = std::min(t, t1) - t0;
  double c = slope * std::exp(-k * (t - t0 - u_end)) * u_end * u_end * ramp_kernel(k * u_end);

  // Exponential part over [t1, t]: peak * int_0^W e^{-kd v} e^{-k (W - v)} dv.
  if (t > t1) {
    const double w = t - t1;
    const double kd = tac.plasma_decay;
    // = peak * e^{-max(k,kd) W} * W * (1 - e^{-|k - kd| W}) / (|k - kd| W)
    const double lo = std::min(k, kd);
    const double hi = std::max(k, kd);
    c += tac.plasma_peak * std::exp(-lo * w) * w * decay_kernel((hi - lo) * w);
  }
  return tac.k_trans * c;
}

double tofts_peak(const ToftsTac& tac, double horizon) {
  // Coarse scan then golden-section refinement around the best sample.
  const int n = 2048;
  double best_t = 0.0;
  double best = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double t = horizon * i / n;
    const double c = tofts_tac(tac, t, horizon);
    if (c > best) {
      best = c;
      best_t = t;
    }
  }
  double a = std::max(0.0, best_t - horizon / n);
  double b = std::min(horizon, best_t + horizon / n);
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int it = 0; it < 80; ++it) {
    const double x1 = b - g * (b - a);
    const double x2 = a + g * (b - a);
    if (tofts_tac(tac, x1, horizon) > tofts_tac(tac, x2, horizon)) {
      b = x2;
    } else {
      a = x1;
    }
  }
  return std::max(best, tofts_tac(tac, 0.5 * (a + b), horizon));
}

void DynamicPhantom::validate() const {
  tac.validate(horizon);
  if (!(breathing_amplitude >= 0.0 && breathing_amplitude < 1.0)) {
    throw Error("invalid_phantom", "breathing amplitude must be in [0, 1)");
  }
  if (!(breathing_period > 0.0)) throw Error("invalid_phantom", "breathing period must be positive");
  if (!(anatomy.lesion.radius > 0.0)) throw Error("invalid_phantom", "lesion radius must be positive");
  for (const auto& e : anatomy.regions) {
    if (!(e.semi_x > 0.0 && e.semi_y > 0.0)) throw Error("invalid_phantom", "ellipse semi-axes must be positive");
    if (e.value < 0.0) throw Error("invalid_phantom", "region values must be nonnegative");
  }
  if (anatomy.background < 0.0 || anatomy.lesion.base_value < 0.0 || contrast_gain < 0.0) {
    throw Error("invalid_phantom", "phantom values must be nonnegative");
  }
}

double DynamicPhantom::peak_concentration() const {
  if (peak_cache_ < 0.0 || !(peak_tac_ == tac) || peak_horizon_ != horizon) {
    peak_cache_ = tofts_peak(tac, horizon);
    peak_tac_ = tac;
    peak_horizon_ = horizon;
  }
  return peak_cache_;
}

double DynamicPhantom::evaluate(double x, double y, double t) const {
  const double stretch =
      1.0 + breathing_amplitude * std::sin(2.0 * std::numbers::pi * t / breathing_period);
  const Point2 r{x, y / stretch};
  const auto& les = anatomy.lesion;
  const double dx = r.x - les.center.x;
  const double dy = r.y - les.center.y;
  if (dx * dx + dy * dy <= les.radius * les.radius) {
    const double peak = peak_concentration();
    const double c = peak > 0.0 ? tofts_tac(tac, t, horizon) / peak : 0.0;
    return les.base_value * (1.0 + contrast_gain * c);
  }
  double v = anatomy.background;
  for (const auto& e : anatomy.regions) {
    if (e.contains(r)) v = e.value;
  }
  return v;
}

DynamicPhantom default_phantom(double horizon_s) {
  DynamicPhantom p;
  p.horizon = horizon_s;
  p.anatomy.background = 0.0;
  // Abdominal cross-section: body outline, liver, kidneys, spleen, vessels, gut.
  p.anatomy.regions = {
      {{0.0, 0.0}, 1.70, 1.40, 0.0, 0.008},
      {{-0.55, 0.35}, 0.65, 0.45, 20.0, 0.020},
      {{0.70, 0.20}, 0.45, 0.65, -15.0, 0.014},
      {{0.10, -0.55}, 0.55, 0.30, 5.0, 0.030},
      {{-0.20, 0.85}, 0.35, 0.22, 0.0, 0.045},
      {{0.90, -0.55}, 0.22, 0.22, 0.0, 0.025},
      {{-0.95, -0.45}, 0.30, 0.20, 30.0, 0.012},
      {{0.05, 0.10}, 0.12, 0.12, 0.0, 0.055},
  };
  // Subcutaneous flank lesion, about 5 mm under the skin.
  p.anatomy.lesion = {{-0.55, -0.80}, 0.35, 0.02};
  return p;
}

ImageStack render(const DynamicPhantom& phantom, const SpacetimeGrid& grid, int supersample) {
  if (supersample < 1) throw Error("invalid_argument", "supersample must be at least 1");
  phantom.validate();
  phantom.peak_concentration();
  ImageStack out(grid);
  const double h = grid.pixel_size();
  const double sub = h / supersample;
  const double inv = 1.0 / (static_cast<double>(supersample) * supersample);
  parallel_for(static_cast<std::size_t>(grid.frames()), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    const double t = grid.frame_time(k);
    for (int m = 0; m < grid.pixels(); ++m) {
      const Point2 c = grid.pixel_center(m);
      if (supersample == 1) {
        out.coeffs(m, k) = phantom.evaluate(c.x, c.y, t);
        continue;
      }
      double acc = 0.0;
      for (int i = 0; i < supersample; ++i) {
        for (int j = 0; j < supersample; ++j) {
          acc += phantom.evaluate(c.x - 0.5 * h + (i + 0.5) * sub, c.y - 0.5 * h + (j + 0.5) * sub, t);
        }
      }
      out.coeffs(m, k) = acc * inv;
    }
  });
  return out;
}

RoiMask lesion_roi(const DynamicPhantom& phantom, const SpacetimeGrid& grid, int dilation_px) {
  const int side = grid.side();
  std::vector<char> inside(static_cast<std::size_t>(grid.pixels()), 0);
  const auto& les = phantom.anatomy.lesion;
  for (int m = 0; m < grid.pixels(); ++m) {
    const Point2 c = grid.pixel_center(m);
    if (std::hypot(c.x - les.center.x, c.y - les.center.y) <= les.radius) inside[static_cast<std::size_t>(m)] = 1;
  }
  RoiMask roi;
  roi.dilation_px = dilation_px;
  for (int m = 0; m < grid.pixels(); ++m) {
    const int ix = m / side;
    const int iy = m % side;
    bool hit = false;
    for (int dx = -dilation_px; dx <= dilation_px && !hit; ++dx) {
      for (int dy = -dilation_px; dy <= dilation_px && !hit; ++dy) {
        const int jx = ix + dx;
        const int jy = iy + dy;
        if (jx >= 0 && jx < side && jy >= 0 && jy < side) hit = inside[static_cast<std::size_t>(jx * side + jy)] != 0;
      }
    }
    if (hit) roi.pixels.push_back(m);
  }
  roi.validate(grid);
  return roi;
}

nlohmann::json to_json(const DynamicPhantom& p) {
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& e : p.anatomy.regions) {
    regions.push_back({{"center_cm", {e.center.x, e.center.y}},
                       {"semi_axes_cm", {e.semi_x, e.semi_y}},
                       {"rotation_deg", e.rotation_deg},
                       {"value", e.value}});
  }
  return {{"horizon_s", p.horizon},
          {"background_value", p.anatomy.background},
          {"regions", regions},
          {"lesion",
           {{"center_cm", {p.anatomy.lesion.center.x, p.anatomy.lesion.center.y}},
            {"radius_cm", p.anatomy.lesion.radius},
            {"base_value", p.anatomy.lesion.base_value}}},
          {"tac",
           {{"k_trans", p.tac.k_trans},
            {"k_ep", p.tac.k_ep},
            {"t_injection", p.tac.t_injection},
            {"bolus_duration", p.tac.bolus_duration},
            {"plasma_peak", p.tac.plasma_peak},
            {"plasma_decay", p.tac.plasma_decay}}},
          {"contrast_gain", p.contrast_gain},
          {"breathing_amplitude", p.breathing_amplitude},
          {"breathing_period", p.breathing_period}};
}

DynamicPhantom phantom_from_json(const nlohmann::json& doc) {
  DynamicPhantom p = default_phantom(doc.value("horizon_s", 648.0));
  try {
    p.anatomy.background = doc.value("background_value", p.anatomy.background);
    if (doc.contains("regions")) {
      p.anatomy.regions.clear();
      for (const auto& r : doc.at("regions")) {
        Ellipse e;
        e.center = {r.at("center_cm").at(0).get<double>(), r.at("center_cm").at(1).get<double>()};
        e.semi_x = r.at("semi_axes_cm").at(0).get<double>();
        e.semi_y = r.at("semi_axes_cm").at(1).get<double>();
        e.rotation_deg = r.value("rotation_deg", 0.0);
        e.value = r.at("value").get<double>();
        p.anatomy.regions.push_back(e);
      }
    }
    if (doc.contains("lesion")) {
      const auto& l = doc.at("lesion");
      if (l.contains("center_cm")) {
        p.anatomy.lesion.center = {l.at("center_cm").at(0).get<double>(), l.at("center_cm").at(1).get<double>()};
      }
      p.anatomy.lesion.radius = l.value("radius_cm", p.anatomy.lesion.radius);
      p.anatomy.lesion.base_value = l.value("base_value", p.anatomy.lesion.base_value);
    }
    if (doc.contains("tac")) {
      const auto& t = doc.at("tac");
      p.tac.k_trans = t.value("k_trans", p.tac.k_trans);
      p.tac.k_ep = t.value("k_ep", p.tac.k_ep);
      p.tac.t_injection = t.value("t_injection", p.tac.t_injection);
      p.tac.bolus_duration = t.value("bolus_duration", p.tac.bolus_duration);
      p.tac.plasma_peak = t.value("plasma_peak", p.tac.plasma_peak);
      p.tac.plasma_decay = t.value("plasma_decay", p.tac.plasma_decay);
    }
    p.contrast_gain = doc.value("contrast_gain", p.contrast_gain);
    p.breathing_amplitude = doc.value("breathing_amplitude", p.breathing_amplitude);
    p.breathing_period = doc.value("breathing_period", p.breathing_period);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed_config", std::string("bad phantom config: ") + e.what());
  }
  p.validate();
  return p;
}

}  // namespace nfrecon
