#pragma once

#include <array>
#include <string>
#include <vector>

#include "histo/common.hpp"

namespace histo::plotting {

using Colour = std::array<uint8_t, 3>;

/// Minimal RGB raster with a built-in 5×7 bitmap font (upper-case letters,
/// digits and a little punctuation; lower case is drawn as upper case).
class Canvas {
  public:
    Canvas(int width, int height, Colour background = {255, 255, 255});

    int width() const { return width_; }
    int height() const { return height_; }
    void set(int x, int y, Colour c);
    Colour get(int x, int y) const;
    void fill_rect(int x0, int y0, int x1, int y1, Colour c);
    void line(int x0, int y0, int x1, int y1, Colour c);
    void disc(int cx, int cy, int radius, Colour c);
    /// Returns the width of the drawn text in pixels.
    int text(int x, int y, const std::string& s, Colour c, int scale = 1);
    static int text_width(const std::string& s, int scale = 1);
    void save_png(const fs::path& path) const;

  private:
    int width_, height_;
    std::vector<uint8_t> pixels_;
};

struct Histogram {
    double lo = 0.0, hi = 1.0;
    std::vector<int64_t> counts;
    int64_t total() const;
};

/// Equal-width bins over [lo, hi]; values outside are clamped into the end bins.
Histogram histogram(const std::vector<double>& values, int bins, double lo, double hi);

/// Distinct colours for class indices.
Colour class_colour(int k);

struct Series {
    std::string label;
    Histogram hist;
    Colour colour;
};

/// Bar histograms sharing one axis (overlaid with transparency-like outlines).
void plot_histograms(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                     const fs::path& path);

struct ScatterPoint {
    double x = 0.0, y = 0.0;
    Colour colour{0, 0, 0};
};
void plot_scatter(const std::vector<ScatterPoint>& points, const std::string& title, const std::string& x_label,
                  const std::string& y_label, const fs::path& path, const std::vector<std::pair<std::string, Colour>>& legend = {});

/// Row-normalized colour scale, counts printed in cells.
void plot_confusion(const std::vector<std::vector<int64_t>>& confusion, const std::vector<std::string>& labels,
                    const std::string& title, const fs::path& path);

struct TsneOptions {
    double perplexity = 30.0;
    int iterations = 750;
    double learning_rate = 200.0;
    double early_exaggeration = 12.0;
    int exaggeration_iterations = 250;
    std::uint64_t seed = 0;
};

/// Exact t-SNE (O(N²)); returns N×2. Perplexity is clamped to (N−1)/3 for
/// small inputs.
torch::Tensor tsne(const torch::Tensor& points, const TsneOptions& options = {});

}  // namespace histo::plotting
