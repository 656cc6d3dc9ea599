#include "ldmorph/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace ldmorph::render {

namespace {

uint8_t to_byte(double v)
{
    return static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

io::RgbImage blank(int64_t h, int64_t w, uint8_t value)
{
    io::RgbImage img;
    img.height = h;
    img.width = w;
    img.data.assign(static_cast<size_t>(h * w * 3), value);
    return img;
}

void put(io::RgbImage& img, int64_t r, int64_t c, uint8_t red, uint8_t green, uint8_t blue)
{
    const auto i = static_cast<size_t>((r * img.width + c) * 3);
    img.data[i] = red;
    img.data[i + 1] = green;
    img.data[i + 2] = blue;
}

std::string xml_escape(const std::string& s)
{
    std::string out;
    for (char ch : s) {
        switch (ch) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        default: out += ch;
        }
    }
    return out;
}

std::string fmt(double v)
{
    std::ostringstream o;
    o << std::setprecision(4) << v;
    return o.str();
}

} // namespace

io::RgbImage field_rgb(const DisplacementField2D& field, double scale)
{
    const auto h = field.planes.size(1), w = field.planes.size(2);
    if (scale <= 0.0) {
        scale = std::max(field.max_magnitude(), 1e-12);
    }
    auto img = blank(h, w, 0);
    auto a = field.planes.accessor<double, 3>();
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            const double ux = a[0][r][c], uy = a[1][r][c];
            put(img, r, c, to_byte(127.5 + 127.5 * ux / scale), to_byte(127.5 + 127.5 * uy / scale),
                to_byte(255.0 * std::hypot(ux, uy) / scale));
        }
    }
    return img;
}

io::RgbImage field_grid(const DisplacementField2D& field, int64_t spacing)
{
    if (spacing < 1) {
        throw std::invalid_argument("field_grid: spacing must be >= 1");
    }
    const auto h = field.planes.size(1), w = field.planes.size(2);
    auto img = blank(h, w, 255);
    auto a = field.planes.accessor<double, 3>();
    const double s = static_cast<double>(spacing);
    auto cell = [s](double v) { return std::floor(v / s); };
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            bool line = false;
            if (c > 0) {
                line |= cell(static_cast<double>(c) + a[0][r][c]) != cell(static_cast<double>(c - 1) + a[0][r][c - 1]);
            }
            if (r > 0) {
                line |= cell(static_cast<double>(r) + a[1][r][c]) != cell(static_cast<double>(r - 1) + a[1][r - 1][c]);
            }
            if (line) {
                put(img, r, c, 0, 0, 0);
            }
        }
    }
    return img;
}

io::RgbImage jacobian_rgb(const torch::Tensor& det)
{
    auto d = det.to(torch::kFloat64).contiguous();
    const auto h = d.size(0), w = d.size(1);
    auto img = blank(h, w, 0);
    auto a = d.accessor<double, 2>();
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            const double v = a[r][c];
            if (v <= 0.0) {
                put(img, r, c, 220, 20, 20);
                continue;
            }
            // log-ratio around 1: blue for contraction, orange for expansion
            const double t = std::clamp(std::log(v) / std::log(2.0), -1.0, 1.0);
            if (t < 0) {
                put(img, r, c, to_byte(255 * (1 + t)), to_byte(255 * (1 + t)), 255);
            } else {
                put(img, r, c, 255, to_byte(255 * (1 - 0.5 * t)), to_byte(255 * (1 - t)));
            }
        }
    }
    return img;
}

void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<Series>& series)
{
    constexpr double W = 560, H = 360, left = 70, right = 150, top = 40, bottom = 50;
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.y[i])) {
                continue;
            }
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) {
        x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    }
    if (x1 == x0) {
        x1 = x0 + 1;
    }
    if (y1 == y0) {
        y1 = y0 + 1;
    }
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
    auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };

    std::ofstream out(path);
    if (!out) {
        throw RuntimeFailure("cannot write plot " + path.string());
    }
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
        << "</text>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
        << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
        out << "<text x=\"" << px(xv) << "\" y=\"" << H - bottom + 16 << "\" text-anchor=\"middle\">" << fmt(xv)
            << "</text>\n";
        out << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv)
            << "</text>\n";
    }
    out << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">"
        << xml_escape(x_label) << "</text>\n";
    out << "<text transform=\"translate(16," << (top + H - bottom) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
        << xml_escape(y_label) << "</text>\n";
    for (size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = colors[k % 6];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (std::isfinite(s.y[i])) {
                out << px(s.x[i]) << "," << py(s.y[i]) << " ";
            }
        }
        out << "\"/>\n";
        for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (std::isfinite(s.y[i])) {
                out << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << color
                    << "\"/>\n";
            }
        }
        const double ly = top + 16.0 * static_cast<double>(k);
        out << "<line x1=\"" << W - right + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 30 << "\" y2=\"" << ly
            << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        out << "<text x=\"" << W - right + 36 << "\" y=\"" << ly + 4 << "\">" << xml_escape(s.name) << "</text>\n";
    }
    out << "</svg>\n";
}

} // namespace ldmorph::render
