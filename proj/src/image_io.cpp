#include "histo/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace histo::image {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

torch::Tensor read_png(const fs::path& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw UserError("cannot open image " + path.string());

    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_stdio(&img, file.get())) {
        throw UserError("corrupt image " + path.string() + ": " + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    auto buffer = torch::empty({static_cast<int64_t>(img.height), static_cast<int64_t>(img.width), 3},
                               torch::kUInt8);
    if (!png_image_finish_read(&img, nullptr, buffer.data_ptr<std::uint8_t>(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw UserError("corrupt image " + path.string() + ": " + msg);
    }
    return buffer.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous();
}

void write_png(const fs::path& path, const torch::Tensor& rgb) {
    TORCH_CHECK(rgb.dim() == 3 && rgb.size(2) == 3, "write_png expects H×W×3");
    torch::Tensor bytes = rgb;
    if (bytes.scalar_type() != torch::kUInt8) {
        bytes = (bytes.to(torch::kFloat32).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8);
    }
    bytes = bytes.contiguous();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());

    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(bytes.size(1));
    img.height = static_cast<png_uint_32>(bytes.size(0));
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data_ptr<std::uint8_t>(), 0, nullptr)) {
        throw UserError("cannot write image " + path.string() + ": " + img.message);
    }
}

}  // namespace histo::image
