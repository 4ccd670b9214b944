#pragma once

#include <vector>

#include "json.hpp"
#include "nfrecon/grid.hpp"

namespace nfrecon {

struct Ellipse {
  Point2 center;
  double semi_x = 1.0;
  double semi_y = 1.0;
  double rotation_deg = 0.0;
  double value = 0.0;

  bool contains(Point2 r) const;
};

struct Lesion {
  Point2 center;
  double radius = 0.35;
  double base_value = 0.02;
};

/// Static anatomy painted in order: later regions overwrite earlier ones,
/// the lesion is painted last.
struct AnatomyModel {
  std::vector<Ellipse> regions;
  Lesion lesion;
  double background = 0.0;
};

/// Two-compartment Tofts uptake driven by a ramp-then-exponential plasma
/// input: zero before injection, linear rise to `plasma_peak` over the bolus,
/// then exponential decay at `plasma_decay`.
struct ToftsTac {
  double k_trans = 5e-3;
  double k_ep = 6e-3;
  double t_injection = 90.0;
  double bolus_duration = 30.0;
  double plasma_peak = 1.0;
  double plasma_decay = 1.2e-2;

  void validate(double horizon) const;
  bool operator==(const ToftsTac&) const = default;
};

/// Plasma input c_p(t).
double plasma_input(const ToftsTac& tac, double t);

/// Tissue concentration C(t) = k_trans * int_0^t c_p(s) exp(-k_ep (t - s)) ds
/// in closed form. Throws for t outside [0, horizon].
double tofts_tac(const ToftsTac& tac, double t, double horizon);

/// max_{t in [0, horizon]} C(t).
double tofts_peak(const ToftsTac& tac, double horizon);

struct DynamicPhantom {
  AnatomyModel anatomy;
  ToftsTac tac;
  double horizon = 648.0;
  double contrast_gain = 2.0;
  double breathing_amplitude = 0.0;
  double breathing_period = 5.0;

  void validate() const;
  /// Cached peak concentration used to normalise the lesion enhancement.
  double peak_concentration() const;

  double evaluate(double x, double y, double t) const;

 private:
  mutable ToftsTac peak_tac_{};
  mutable double peak_horizon_ = -1.0;
  mutable double peak_cache_ = -1.0;
};

DynamicPhantom default_phantom(double horizon_s = 648.0);

/// Mean of supersample^2 evaluations per pixel at each frame time.
ImageStack render(const DynamicPhantom& phantom, const SpacetimeGrid& grid, int supersample);

/// Pixels whose centers lie in the (undeformed) lesion, dilated by
/// `dilation_px` in the Chebyshev metric.
RoiMask lesion_roi(const DynamicPhantom& phantom, const SpacetimeGrid& grid, int dilation_px = 2);

nlohmann::json to_json(const DynamicPhantom& phantom);
DynamicPhantom phantom_from_json(const nlohmann::json& doc);

}  // namespace nfrecon
