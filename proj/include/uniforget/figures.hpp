#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "uniforget/analysis.hpp"

namespace uniforget {

// Plain SVG emitters. Fixed 480x360 canvas, one colour per series.

namespace detail {

inline constexpr std::array<const char*, 6> palette{"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

struct Frame {
    double x0, x1, y0, y1;
    static constexpr double W = 480, H = 360, L = 50, R = 20, T = 30, B = 40;
    double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
    double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

inline std::string svg_open(const std::string& title) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\" viewBox=\"0 0 480 360\">\n"
           "<rect width=\"480\" height=\"360\" fill=\"white\"/>\n"
           "<text x=\"240\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
           xml_escape(title) + "</text>\n";
}

inline std::string axes(const Frame& f, const std::string& xlabel, const std::string& ylabel) {
    std::string s;
    s += "<rect x=\"" + fmt(Frame::L) + "\" y=\"" + fmt(Frame::T) + "\" width=\"" + fmt(Frame::W - Frame::L - Frame::R) +
         "\" height=\"" + fmt(Frame::H - Frame::T - Frame::B) + "\" fill=\"none\" stroke=\"#444\"/>\n";
    auto label = [&](double x, double y, const std::string& text, const char* anchor) {
        s += "<text x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" text-anchor=\"" + anchor +
             "\" font-family=\"sans-serif\" font-size=\"10\">" + xml_escape(text) + "</text>\n";
    };
    label(Frame::L, Frame::H - Frame::B + 14, fmt(f.x0), "start");
    label(Frame::W - Frame::R, Frame::H - Frame::B + 14, fmt(f.x1), "end");
    label(Frame::L - 4, Frame::H - Frame::B, fmt(f.y0), "end");
    label(Frame::L - 4, Frame::T + 8, fmt(f.y1), "end");
    label((Frame::L + Frame::W - Frame::R) / 2, Frame::H - 8, xlabel, "middle");
    label(12, Frame::T - 8, ylabel, "start");
    return s;
}

inline std::string legend(const std::vector<std::string>& names) {
    std::string s;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const double y = Frame::T + 14 + 14 * static_cast<double>(i);
        s += "<rect x=\"" + fmt(Frame::W - Frame::R - 120) + "\" y=\"" + fmt(y - 8) + "\" width=\"10\" height=\"10\" fill=\"" +
             palette[i % palette.size()] + "\"/>\n";
        s += "<text x=\"" + fmt(Frame::W - Frame::R - 105) + "\" y=\"" + fmt(y) +
             "\" font-family=\"sans-serif\" font-size=\"10\">" + xml_escape(names[i]) + "</text>\n";
    }
    return s;
}

inline void pad(double& lo, double& hi) {
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double m = 0.05 * (hi - lo);
    lo -= m;
    hi += m;
}

}  // namespace detail

/// Scatter of both projected sets.
inline std::string projection_svg(const Projection2D& p, const std::string& title, const std::string& name_a, const std::string& name_b) {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto* set : {&p.a, &p.b}) {
        for (const auto& q : *set) {
            x0 = std::min(x0, q[0]);
            x1 = std::max(x1, q[0]);
            y0 = std::min(y0, q[1]);
            y1 = std::max(y1, q[1]);
        }
    }
    detail::pad(x0, x1);
    detail::pad(y0, y1);
    const detail::Frame f{x0, x1, y0, y1};
    auto s = detail::svg_open(title + " (2 comps: " + detail::fmt(100.0 * p.explained_variance) + "% var)");
    s += detail::axes(f, "PC1", "PC2");
    int series = 0;
    for (const auto* set : {&p.a, &p.b}) {
        for (const auto& q : *set) {
            s += "<circle cx=\"" + detail::fmt(f.px(q[0])) + "\" cy=\"" + detail::fmt(f.py(q[1])) + "\" r=\"2\" fill=\"" +
                 detail::palette[series] + "\" fill-opacity=\"0.6\"/>\n";
        }
        ++series;
    }
    s += detail::legend({name_a, name_b});
    return s + "</svg>\n";
}

inline std::string projection_csv(const Projection2D& p, const std::string& name_a, const std::string& name_b) {
    std::string out = "set,pc1,pc2\n";
    char buf[96];
    for (const auto& q : p.a) {
        std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", q[0], q[1]);
        out += name_a + buf;
    }
    for (const auto& q : p.b) {
        std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", q[0], q[1]);
        out += name_b + buf;
    }
    return out;
}

/// Step histograms of profiles that share one binning (see pooled_profiles),
/// each normalized to unit area.
inline std::string magnitude_svg(const std::vector<MagnitudeProfile>& profiles, const std::vector<std::string>& names,
                                 const std::string& title) {
    require(!profiles.empty() && profiles.size() == names.size(), "magnitude_svg: one name per profile");
    double x0 = profiles.front().lo, x1 = profiles.front().hi;
    if (x1 - x0 < 1e-12) {
        x0 -= 0.5;
        x1 += 0.5;
    }
    const double width = (x1 - x0) / magnitude_bins;
    double ymax = 0.0;
    std::vector<std::vector<double>> dens;
    for (const auto& p : profiles) {
        const double n = static_cast<double>(p.norms.size());
        std::vector<double> d;
        for (double c : p.histogram) d.push_back(c / (n * width));
        ymax = std::max(ymax, *std::max_element(d.begin(), d.end()));
        dens.push_back(std::move(d));
    }
    const detail::Frame f{x0, x1, 0.0, ymax > 0 ? 1.05 * ymax : 1.0};
    auto s = detail::svg_open(title);
    s += detail::axes(f, "||z_N||", "density");
    for (std::size_t i = 0; i < dens.size(); ++i) {
        std::string path = "M" + detail::fmt(f.px(x0)) + "," + detail::fmt(f.py(0));
        for (int b = 0; b < magnitude_bins; ++b) {
            const double y = f.py(dens[i][static_cast<std::size_t>(b)]);
            path += " L" + detail::fmt(f.px(x0 + b * width)) + "," + detail::fmt(y);
            path += " L" + detail::fmt(f.px(x0 + (b + 1) * width)) + "," + detail::fmt(y);
        }
        path += " L" + detail::fmt(f.px(x1)) + "," + detail::fmt(f.py(0));
        s += "<path d=\"" + path + "\" fill=\"none\" stroke=\"" + detail::palette[i % detail::palette.size()] +
             "\" stroke-width=\"1.5\"/>\n";
    }
    s += detail::legend(names);
    return s + "</svg>\n";
}

inline std::string magnitude_csv(const std::vector<MagnitudeProfile>& profiles, const std::vector<std::string>& names) {
    std::string out = "set,norm\n";
    char buf[48];
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        for (double n : profiles[i].norms) {
            std::snprintf(buf, sizeof buf, ",%.9g\n", n);
            out += names[i] + buf;
        }
    }
    return out;
}

}  // namespace uniforget
