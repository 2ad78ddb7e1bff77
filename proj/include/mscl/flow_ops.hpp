#pragma once

#include <string>
#include <vector>

#include "mscl/rng.hpp"

namespace mscl {

// Per-frame H x W field of 2-vectors (pixels/frame displacement), planar.
struct FlowField {
    int h = 0, w = 0;
    std::vector<double> u, v;  // h*w each, row-major

    FlowField() = default;
    FlowField(int h_, int w_) : h(h_), w(w_), u(static_cast<std::size_t>(h_) * w_, 0.0),
                                v(static_cast<std::size_t>(h_) * w_, 0.0) {}
    std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * w + x; }
};

// Row-major H x W x C image, values nominally in [0,1] for C=3.
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h_, int w_, int c_)
        : h(h_), w(w_), c(c_), data(static_cast<std::size_t>(h_) * w_ * c_, 0.0) {}
    double& at(int y, int x, int ch) {
        return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }
    double at(int y, int x, int ch) const {
        return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }
};

// 3x3 Sobel responses per flow channel combined as gradient magnitude,
// channel magnitudes summed. Replicate padding at the border. H,W >= 3.
Image sobel_boundary(const FlowField& flow);

// Average-pool with window and stride r (partial blocks at the border
// average over their actual extent), then nearest-neighbor upsample back.
// The result is piecewise constant on r x r blocks. r = 1 is the identity.
Image coarsen(const Image& map, int r);

// softmax(coarsen(sobel(flow))) over all H*W locations; non-negative and
// sums to 1.
Image weight_map(const FlowField& flow, int r);

// Default coarsening stride for a given resolution, proportional to the
// reference granularity of 28 at 112 px.
int default_coarsen_stride(int h);

// Optical-flow color wheel: hue encodes vector angle, saturation encodes
// magnitude / sat_radius clipped to 1, zero flow maps to white.
Image flow_to_rgb(const FlowField& flow, double sat_radius);

// Rotates every 2-vector by theta; spatial positions are untouched.
FlowField rotate_flow(const FlowField& flow, double theta);

// Uniform draw from [alpha, 2*pi - alpha]; requires 0 < alpha < pi.
double sample_angle(double alpha, Rng& rng);

// Maximum vector magnitude over a set of flow frames (the per-clip
// saturation radius for flow_to_rgb).
double max_flow_magnitude(const std::vector<FlowField>& flows);

// Mirrors the field about the vertical axis and negates the horizontal
// component, the physically consistent flip of a flow map.
FlowField flip_flow_horizontal(const FlowField& flow);

// P6 PPM dump of an image in [0,1], for visual inspection.
void write_ppm(const Image& img, const std::string& path);

}  // namespace mscl
