#include "histo/plotting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "histo/image_io.hpp"

namespace histo::plotting {

namespace {

using Glyph = std::array<uint8_t, 7>;

const std::map<char, Glyph>& font() {
    static const std::map<char, Glyph> glyphs{
        {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
        {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
        {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
        {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
        {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
        {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
        {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
        {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
        {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
        {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
        {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
        {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
        {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
        {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
        {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
        {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
        {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
        {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
        {'.', {0, 0, 0, 0, 0, 0x0C, 0x0C}},                {',', {0, 0, 0, 0, 0x0C, 0x04, 0x08}},
        {'-', {0, 0, 0, 0x1F, 0, 0, 0}},                   {':', {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0}},
        {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}}, {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
        {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}}, {'/', {0, 0x01, 0x02, 0x04, 0x08, 0x10, 0}},
        {'_', {0, 0, 0, 0, 0, 0, 0x1F}},                   {'+', {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0}},
        {'=', {0, 0, 0x1F, 0, 0x1F, 0, 0}},                {'>', {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08}},
        {'<', {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02}},
    };
    return glyphs;
}

constexpr Colour kBlack{0, 0, 0};

std::string label_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

struct Frame {
    int left = 70, right = 20, top = 40, bottom = 50;
    int width = 640, height = 480;
    double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;

    int px(double x) const {
        return left + static_cast<int>(std::lround((x - x_lo) / (x_hi - x_lo) * (width - left - right)));
    }
    int py(double y) const {
        return height - bottom - static_cast<int>(std::lround((y - y_lo) / (y_hi - y_lo) * (height - top - bottom)));
    }
};

void draw_axes(Canvas& canvas, const Frame& f, const std::string& title, const std::string& x_label,
               const std::string& y_label) {
    canvas.text((f.width - Canvas::text_width(title, 2)) / 2, 10, title, kBlack, 2);
    const int x0 = f.left, x1 = f.width - f.right, y0 = f.top, y1 = f.height - f.bottom;
    canvas.line(x0, y1, x1, y1, kBlack);
    canvas.line(x0, y0, x0, y1, kBlack);
    for (int i = 0; i <= 4; ++i) {
        const double xv = f.x_lo + (f.x_hi - f.x_lo) * i / 4.0;
        const double yv = f.y_lo + (f.y_hi - f.y_lo) * i / 4.0;
        const int xp = f.px(xv), yp = f.py(yv);
        canvas.line(xp, y1, xp, y1 + 4, kBlack);
        canvas.line(x0 - 4, yp, x0, yp, kBlack);
        const auto xs = label_number(xv), ys = label_number(yv);
        canvas.text(xp - Canvas::text_width(xs) / 2, y1 + 8, xs, kBlack);
        canvas.text(x0 - 8 - Canvas::text_width(ys), yp - 3, ys, kBlack);
    }
    canvas.text((x0 + x1 - Canvas::text_width(x_label)) / 2, f.height - 18, x_label, kBlack);
    canvas.text(4, f.top - 14, y_label, kBlack);
}

}  // namespace

Canvas::Canvas(int width, int height, Colour background)
    : width_(width), height_(height), pixels_(static_cast<std::size_t>(width * height * 3)) {
    if (width < 1 || height < 1) throw UserError("canvas size must be positive");
    for (std::size_t i = 0; i < pixels_.size(); i += 3) std::copy(background.begin(), background.end(), pixels_.begin() + static_cast<long>(i));
}

void Canvas::set(int x, int y, Colour c) {
    if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
    std::copy(c.begin(), c.end(), pixels_.begin() + (static_cast<long>(y) * width_ + x) * 3);
}

Colour Canvas::get(int x, int y) const {
    const auto i = (static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x)) * 3;
    return {pixels_.at(i), pixels_.at(i + 1), pixels_.at(i + 2)};
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Colour c) {
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) set(x, y, c);
    }
}

void Canvas::line(int x0, int y0, int x1, int y1, Colour c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        set(x0, y0, c);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

void Canvas::disc(int cx, int cy, int radius, Colour c) {
    for (int y = -radius; y <= radius; ++y) {
        for (int x = -radius; x <= radius; ++x) {
            if (x * x + y * y <= radius * radius) set(cx + x, cy + y, c);
        }
    }
}

int Canvas::text_width(const std::string& s, int scale) { return static_cast<int>(s.size()) * 6 * scale; }

int Canvas::text(int x, int y, const std::string& s, Colour c, int scale) {
    int cursor = x;
    for (char ch : s) {
        const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        auto it = font().find(up);
        if (it != font().end()) {
            for (int row = 0; row < 7; ++row) {
                for (int col = 0; col < 5; ++col) {
                    if (it->second[static_cast<std::size_t>(row)] & (0x10 >> col)) {
                        fill_rect(cursor + col * scale, y + row * scale, cursor + (col + 1) * scale - 1,
                                  y + (row + 1) * scale - 1, c);
                    }
                }
            }
        }
        cursor += 6 * scale;
    }
    return cursor - x;
}

void Canvas::save_png(const fs::path& path) const {
    auto t = torch::from_blob(const_cast<uint8_t*>(pixels_.data()), {height_, width_, 3}, torch::kUInt8).clone();
    image::write_png(path, t);
}

int64_t Histogram::total() const {
    int64_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

Histogram histogram(const std::vector<double>& values, int bins, double lo, double hi) {
    if (bins < 1) throw UserError("histogram needs at least one bin");
    if (!(hi > lo)) throw UserError("histogram range must be increasing");
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    for (double v : values) {
        auto b = static_cast<int64_t>(std::floor((v - lo) / (hi - lo) * bins));
        b = std::clamp<int64_t>(b, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

Colour class_colour(int k) {
    static const std::array<Colour, 10> palette{{{31, 119, 180},
                                                 {255, 127, 14},
                                                 {44, 160, 44},
                                                 {214, 39, 40},
                                                 {148, 103, 189},
                                                 {140, 86, 75},
                                                 {227, 119, 194},
                                                 {127, 127, 127},
                                                 {188, 189, 34},
                                                 {23, 190, 207}}};
    return palette[static_cast<std::size_t>(std::abs(k)) % palette.size()];
}

void plot_histograms(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                     const fs::path& path) {
    if (series.empty()) throw UserError("nothing to plot");
    Frame f;
    f.x_lo = series[0].hist.lo;
    f.x_hi = series[0].hist.hi;
    int64_t peak = 1;
    for (const auto& s : series) {
        for (auto c : s.hist.counts) peak = std::max(peak, c);
    }
    f.y_hi = static_cast<double>(peak);
    Canvas canvas(f.width, f.height);
    draw_axes(canvas, f, title, x_label, "COUNT");

    const auto n_series = static_cast<int>(series.size());
    for (int si = 0; si < n_series; ++si) {
        const auto& s = series[static_cast<std::size_t>(si)];
        const auto bins = static_cast<int>(s.hist.counts.size());
        for (int b = 0; b < bins; ++b) {
            const double lo = s.hist.lo + (s.hist.hi - s.hist.lo) * b / bins;
            const double hi = s.hist.lo + (s.hist.hi - s.hist.lo) * (b + 1) / bins;
            const int x0 = f.px(lo), x1 = f.px(hi) - 1;
            const int w = std::max(1, (x1 - x0) / n_series);
            const int bx = x0 + si * w;
            const auto count = s.hist.counts[static_cast<std::size_t>(b)];
            if (count > 0) canvas.fill_rect(bx, f.py(static_cast<double>(count)), bx + w - 1, f.py(0.0) - 1, s.colour);
        }
        canvas.fill_rect(f.width - 150, f.top + 8 + si * 14, f.width - 140, f.top + 16 + si * 14, s.colour);
        canvas.text(f.width - 134, f.top + 9 + si * 14, s.label, kBlack);
    }
    canvas.save_png(path);
}

void plot_scatter(const std::vector<ScatterPoint>& points, const std::string& title, const std::string& x_label,
                  const std::string& y_label, const fs::path& path,
                  const std::vector<std::pair<std::string, Colour>>& legend) {
    Frame f;
    if (!points.empty()) {
        auto [xmin, xmax] = std::minmax_element(points.begin(), points.end(),
                                                [](const ScatterPoint& a, const ScatterPoint& b) { return a.x < b.x; });
        auto [ymin, ymax] = std::minmax_element(points.begin(), points.end(),
                                                [](const ScatterPoint& a, const ScatterPoint& b) { return a.y < b.y; });
        f.x_lo = xmin->x;
        f.x_hi = xmax->x;
        f.y_lo = ymin->y;
        f.y_hi = ymax->y;
    }
    const double px = std::max(1e-12, (f.x_hi - f.x_lo) * 0.05), py = std::max(1e-12, (f.y_hi - f.y_lo) * 0.05);
    f.x_lo -= px;
    f.x_hi += px;
    f.y_lo -= py;
    f.y_hi += py;
    Canvas canvas(f.width, f.height);
    draw_axes(canvas, f, title, x_label, y_label);
    for (const auto& p : points) canvas.disc(f.px(p.x), f.py(p.y), 2, p.colour);
    int row = 0;
    for (const auto& [label, colour] : legend) {
        canvas.fill_rect(f.width - 150, f.top + 8 + row * 14, f.width - 140, f.top + 16 + row * 14, colour);
        canvas.text(f.width - 134, f.top + 9 + row * 14, label, kBlack);
        ++row;
    }
    canvas.save_png(path);
}

void plot_confusion(const std::vector<std::vector<int64_t>>& confusion, const std::vector<std::string>& labels,
                    const std::string& title, const fs::path& path) {
    const auto n = static_cast<int>(confusion.size());
    if (n == 0) throw UserError("empty confusion matrix");
    const int cell = 48, left = 90, top = 50;
    Canvas canvas(left + n * cell + 20, top + n * cell + 60);
    canvas.text(10, 10, title, kBlack, 2);
    for (int r = 0; r < n; ++r) {
        int64_t row_total = 0;
        for (auto v : confusion[static_cast<std::size_t>(r)]) row_total += v;
        for (int c = 0; c < n; ++c) {
            const auto v = confusion[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            const double frac = row_total > 0 ? static_cast<double>(v) / static_cast<double>(row_total) : 0.0;
            const auto shade = static_cast<uint8_t>(std::lround(255.0 * (1.0 - frac)));
            const Colour colour{shade, shade, 255};
            canvas.fill_rect(left + c * cell, top + r * cell, left + (c + 1) * cell - 2, top + (r + 1) * cell - 2, colour);
            const auto s = std::to_string(v);
            canvas.text(left + c * cell + (cell - Canvas::text_width(s)) / 2, top + r * cell + cell / 2 - 4, s,
                        frac > 0.5 ? Colour{255, 255, 255} : kBlack);
        }
        const auto label = r < static_cast<int>(labels.size()) ? labels[static_cast<std::size_t>(r)] : std::to_string(r);
        canvas.text(4, top + r * cell + cell / 2 - 4, label.substr(0, 13), kBlack);
    }
    for (int c = 0; c < n; ++c) {
        const auto label = c < static_cast<int>(labels.size()) ? labels[static_cast<std::size_t>(c)] : std::to_string(c);
        canvas.text(left + c * cell + 2, top + n * cell + 6, label.substr(0, 7), kBlack);
    }
    canvas.text(left, top + n * cell + 24, "PREDICTED (COLUMNS) / TRUE (ROWS)", kBlack);
    canvas.save_png(path);
}

torch::Tensor tsne(const torch::Tensor& points, const TsneOptions& options) {
    if (points.dim() != 2) throw UserError("t-SNE expects an N×D matrix");
    const int64_t n = points.size(0);
    if (n == 0) return torch::zeros({0, 2}, torch::kFloat64);
    if (n == 1) return torch::zeros({1, 2}, torch::kFloat64);
    torch::NoGradGuard no_grad;
    auto x = points.to(torch::kFloat64);
    auto d2 = (x.unsqueeze(1) - x.unsqueeze(0)).square().sum(2).contiguous();

    const double perplexity = std::max(1.0, std::min(options.perplexity, static_cast<double>(n - 1) / 3.0));
    const double target = std::log(perplexity);
    auto p = torch::zeros({n, n}, torch::kFloat64);
    {
        auto da = d2.accessor<double, 2>();
        auto pa = p.accessor<double, 2>();
        std::vector<double> row(static_cast<std::size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
            for (int iter = 0; iter < 100; ++iter) {
                double sum = 0.0, weighted = 0.0;
                for (int64_t j = 0; j < n; ++j) {
                    const double v = j == i ? 0.0 : std::exp(-beta * da[i][j]);
                    row[static_cast<std::size_t>(j)] = v;
                    sum += v;
                    weighted += v * da[i][j];
                }
                if (sum <= 0.0) {
                    hi = beta;
                    beta = (lo + hi) / 2.0;
                    continue;
                }
                const double entropy = std::log(sum) + beta * weighted / sum;
                const double diff = entropy - target;
                for (int64_t j = 0; j < n; ++j) pa[i][j] = row[static_cast<std::size_t>(j)] / sum;
                if (std::abs(diff) < 1e-5) break;
                if (diff > 0) {
                    lo = beta;
                    beta = std::isinf(hi) ? beta * 2.0 : (lo + hi) / 2.0;
                } else {
                    hi = beta;
                    beta = (lo + hi) / 2.0;
                }
            }
        }
    }
    p = (p + p.t()) / (2.0 * static_cast<double>(n));
    p = p.clamp_min(1e-12);

    Rng rng(options.seed);
    auto y = torch::empty({n, 2}, torch::kFloat64);
    {
        auto ya = y.accessor<double, 2>();
        for (int64_t i = 0; i < n; ++i) {
            ya[i][0] = 1e-4 * rng.normal();
            ya[i][1] = 1e-4 * rng.normal();
        }
    }
    auto velocity = torch::zeros_like(y);
    auto gains = torch::ones_like(y);
    auto eye = torch::eye(n, torch::kFloat64);
    for (int iter = 0; iter < options.iterations; ++iter) {
        const double exaggeration = iter < options.exaggeration_iterations ? options.early_exaggeration : 1.0;
        const double momentum = iter < options.exaggeration_iterations ? 0.5 : 0.8;
        auto dy = (y.unsqueeze(1) - y.unsqueeze(0));
        auto num = 1.0 / (1.0 + dy.square().sum(2));
        num = num * (1.0 - eye);
        auto q = (num / num.sum()).clamp_min(1e-12);
        auto w = (exaggeration * p - q) * num;
        auto grad = 4.0 * (w.unsqueeze(2) * dy).sum(1);
        auto same_sign = (grad > 0) == (velocity > 0);
        gains = torch::where(same_sign, gains * 0.8, gains + 0.2).clamp_min(0.01);
        velocity = momentum * velocity - options.learning_rate * gains * grad;
        y = y + velocity;
        y = y - y.mean(0, true);
    }
    return y;
}

}  // namespace histo::plotting
