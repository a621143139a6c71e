#ifndef KDX_IMAGE_IO_HPP
#define KDX_IMAGE_IO_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace kdx {

// Decoded 8-bit image, channel-major ([C][H][W], RGB order for 3 channels).
struct RawImage {
    int channels = 0;
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> data;

    std::uint8_t at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * h + y) * w + x];
    }
};

// Decodes PNG/JPEG/BMP to grayscale (want_channels=1) or RGB (3). A color
// file requested as grayscale uses the standard luminance conversion; a
// grayscale file requested as RGB is replicated across channels.
// Throws std::runtime_error when the file cannot be decoded.
RawImage decode_image(const std::string& path, int want_channels);

// Bilinear resize; returns the input unchanged when already at target size.
RawImage resize_bilinear(const RawImage& img, int target_h, int target_w);

void write_png_gray(const std::string& path, int h, int w, const std::uint8_t* data);

// data_hwc is interleaved RGB.
void write_png_rgb(const std::string& path, int h, int w, const std::uint8_t* data_hwc);

}  // namespace kdx

#endif  // KDX_IMAGE_IO_HPP
