#include "kdx/image_io.hpp"

#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace kdx {

namespace {

RawImage from_mat(const cv::Mat& m, int channels) {
    RawImage out;
    out.channels = channels;
    out.h = m.rows;
    out.w = m.cols;
    out.data.resize(static_cast<std::size_t>(channels) * m.rows * m.cols);
    if (channels == 1) {
        for (int y = 0; y < m.rows; ++y) {
            const std::uint8_t* row = m.ptr<std::uint8_t>(y);
            std::copy(row, row + m.cols, out.data.begin() + static_cast<std::size_t>(y) * m.cols);
        }
    } else {
        // OpenCV stores BGR interleaved; emit planar RGB.
        const std::size_t plane = static_cast<std::size_t>(m.rows) * m.cols;
        for (int y = 0; y < m.rows; ++y) {
            const cv::Vec3b* row = m.ptr<cv::Vec3b>(y);
            for (int x = 0; x < m.cols; ++x) {
                const std::size_t px = static_cast<std::size_t>(y) * m.cols + x;
                out.data[px] = row[x][2];
                out.data[plane + px] = row[x][1];
                out.data[2 * plane + px] = row[x][0];
            }
        }
    }
    return out;
}

cv::Mat to_mat(const RawImage& img) {
    if (img.channels == 1) {
        cv::Mat m(img.h, img.w, CV_8UC1);
        for (int y = 0; y < img.h; ++y) {
            std::copy(img.data.begin() + static_cast<std::size_t>(y) * img.w,
                      img.data.begin() + static_cast<std::size_t>(y + 1) * img.w,
                      m.ptr<std::uint8_t>(y));
        }
        return m;
    }
    cv::Mat m(img.h, img.w, CV_8UC3);
    const std::size_t plane = static_cast<std::size_t>(img.h) * img.w;
    for (int y = 0; y < img.h; ++y) {
        cv::Vec3b* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.w; ++x) {
            const std::size_t px = static_cast<std::size_t>(y) * img.w + x;
            row[x] = cv::Vec3b(img.data[2 * plane + px], img.data[plane + px], img.data[px]);
        }
    }
    return m;
}

}  // namespace

RawImage decode_image(const std::string& path, int want_channels) {
    if (want_channels != 1 && want_channels != 3) {
        throw std::invalid_argument("decode_image: channels must be 1 or 3");
    }
    cv::Mat m = cv::imread(path, want_channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
    if (m.empty()) throw std::runtime_error("cannot decode image: " + path);
    return from_mat(m, want_channels);
}

RawImage resize_bilinear(const RawImage& img, int target_h, int target_w) {
    if (img.h == target_h && img.w == target_w) return img;
    cv::Mat src = to_mat(img);
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(target_w, target_h), 0, 0, cv::INTER_LINEAR);
    return from_mat(dst, img.channels);
}

void write_png_gray(const std::string& path, int h, int w, const std::uint8_t* data) {
    cv::Mat m(h, w, CV_8UC1);
    for (int y = 0; y < h; ++y) {
        std::copy(data + static_cast<std::size_t>(y) * w, data + static_cast<std::size_t>(y + 1) * w,
                  m.ptr<std::uint8_t>(y));
    }
    if (!cv::imwrite(path, m)) throw std::runtime_error("cannot write image: " + path);
}

void write_png_rgb(const std::string& path, int h, int w, const std::uint8_t* data_hwc) {
    cv::Mat m(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y) {
        cv::Vec3b* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < w; ++x) {
            const std::uint8_t* px = data_hwc + 3 * (static_cast<std::size_t>(y) * w + x);
            row[x] = cv::Vec3b(px[2], px[1], px[0]);
        }
    }
    if (!cv::imwrite(path, m)) throw std::runtime_error("cannot write image: " + path);
}

}  // namespace kdx
