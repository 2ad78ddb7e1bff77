#include "mscl/flow_ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace mscl {

namespace {

constexpr double kPi = 3.14159265358979323846;

int clamp_idx(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

}  // namespace

Image sobel_boundary(const FlowField& flow) {
    if (flow.h < 3 || flow.w < 3) {
        throw std::runtime_error("sobel_boundary: field must be at least 3x3, got " +
                                 std::to_string(flow.h) + "x" + std::to_string(flow.w));
    }
    static const double gx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    static const double gy[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};

    Image out(flow.h, flow.w, 1);
    const std::vector<double>* chans[2] = {&flow.u, &flow.v};
    for (const auto* chan : chans) {
        for (int y = 0; y < flow.h; ++y) {
            for (int x = 0; x < flow.w; ++x) {
                double rx = 0.0, ry = 0.0;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int yy = clamp_idx(y + dy, flow.h);
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int xx = clamp_idx(x + dx, flow.w);
                        const double s = (*chan)[flow.idx(yy, xx)];
                        rx += gx[dy + 1][dx + 1] * s;
                        ry += gy[dy + 1][dx + 1] * s;
                    }
                }
                out.at(y, x, 0) += std::sqrt(rx * rx + ry * ry);
            }
        }
    }
    return out;
}

Image coarsen(const Image& map, int r) {
    if (r <= 0) throw std::runtime_error("coarsen: stride must be positive, got " + std::to_string(r));
    if (map.c != 1) throw std::runtime_error("coarsen: expected single-channel map");
    if (r == 1) return map;
    Image out(map.h, map.w, 1);
    for (int by = 0; by < map.h; by += r) {
        const int y1 = std::min(by + r, map.h);
        for (int bx = 0; bx < map.w; bx += r) {
            const int x1 = std::min(bx + r, map.w);
            double acc = 0.0;
            for (int y = by; y < y1; ++y) {
                for (int x = bx; x < x1; ++x) acc += map.at(y, x, 0);
            }
            const double mean = acc / ((y1 - by) * (x1 - bx));
            for (int y = by; y < y1; ++y) {
                for (int x = bx; x < x1; ++x) out.at(y, x, 0) = mean;
            }
        }
    }
    return out;
}

Image weight_map(const FlowField& flow, int r) {
    Image m = coarsen(sobel_boundary(flow), r);
    double mx = m.data[0];
    for (double v : m.data) mx = std::max(mx, v);
    double total = 0.0;
    for (auto& v : m.data) {
        v = std::exp(v - mx);
        total += v;
    }
    for (auto& v : m.data) v /= total;
    return m;
}

int default_coarsen_stride(int h) {
    const int r = static_cast<int>(std::lround(28.0 * h / 112.0));
    return std::max(1, r);
}

Image flow_to_rgb(const FlowField& flow, double sat_radius) {
    if (!(sat_radius > 0.0)) {
        throw std::runtime_error("flow_to_rgb: saturation radius must be positive");
    }
    Image out(flow.h, flow.w, 3);
    for (int y = 0; y < flow.h; ++y) {
        for (int x = 0; x < flow.w; ++x) {
            const double fu = flow.u[flow.idx(y, x)];
            const double fv = flow.v[flow.idx(y, x)];
            const double mag = std::sqrt(fu * fu + fv * fv);
            const double sat = std::min(mag / sat_radius, 1.0);
            // Angle to hue in [0,1); HSV with V=1 so zero flow is white.
            double hue = std::atan2(fv, fu) / (2.0 * kPi);
            if (hue < 0.0) hue += 1.0;
            const double h6 = hue * 6.0;
            const int sector = std::min(static_cast<int>(h6), 5);
            const double f = h6 - sector;
            const double p = 1.0 - sat;
            const double q = 1.0 - sat * f;
            const double t = 1.0 - sat * (1.0 - f);
            double r, g, b;
            switch (sector) {
                case 0: r = 1.0; g = t; b = p; break;
                case 1: r = q; g = 1.0; b = p; break;
                case 2: r = p; g = 1.0; b = t; break;
                case 3: r = p; g = q; b = 1.0; break;
                case 4: r = t; g = p; b = 1.0; break;
                default: r = 1.0; g = p; b = q; break;
            }
            out.at(y, x, 0) = r;
            out.at(y, x, 1) = g;
            out.at(y, x, 2) = b;
        }
    }
    return out;
}

FlowField rotate_flow(const FlowField& flow, double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    FlowField out(flow.h, flow.w);
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
        out.u[i] = c * flow.u[i] - s * flow.v[i];
        out.v[i] = s * flow.u[i] + c * flow.v[i];
    }
    return out;
}

double sample_angle(double alpha, Rng& rng) {
    if (!(alpha > 0.0 && alpha < kPi)) {
        throw std::runtime_error("sample_angle: alpha must lie in (0, pi), got " +
                                 std::to_string(alpha));
    }
    return rng.uniform(alpha, 2.0 * kPi - alpha);
}

double max_flow_magnitude(const std::vector<FlowField>& flows) {
    double mx = 0.0;
    for (const auto& f : flows) {
        for (std::size_t i = 0; i < f.u.size(); ++i) {
            mx = std::max(mx, std::sqrt(f.u[i] * f.u[i] + f.v[i] * f.v[i]));
        }
    }
    return mx;
}

FlowField flip_flow_horizontal(const FlowField& flow) {
    FlowField out(flow.h, flow.w);
    for (int y = 0; y < flow.h; ++y) {
        for (int x = 0; x < flow.w; ++x) {
            const auto src = flow.idx(y, flow.w - 1 - x);
            out.u[flow.idx(y, x)] = -flow.u[src];
            out.v[flow.idx(y, x)] = flow.v[src];
        }
    }
    return out;
}

void write_ppm(const Image& img, const std::string& path) {
    if (img.c != 3) throw std::runtime_error("write_ppm: expected 3-channel image");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    for (double v : img.data) {
        const double clamped = std::clamp(v, 0.0, 1.0);
        f.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
    }
    if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

}  // namespace mscl
