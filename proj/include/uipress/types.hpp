#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "uipress/errors.hpp"

namespace uipress {

struct GridDims {
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t cells() const { return h * w; }
    friend bool operator==(const GridDims&, const GridDims&) = default;
};

// RGB page raster, pixels in [0,1], stored row-major as (y, x, channel).
struct PageImage {
    std::size_t height_px = 0;
    std::size_t width_px = 0;
    std::vector<double> pixels;

    static constexpr std::size_t channels = 3;

    PageImage() = default;
    PageImage(std::size_t h, std::size_t w, double fill = 0.0)
        : height_px(h), width_px(w), pixels(h * w * channels, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) {
        return pixels[(y * width_px + x) * channels + c];
    }
    double at(std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[(y * width_px + x) * channels + c];
    }

    friend bool operator==(const PageImage&, const PageImage&) = default;
};

enum class ElementCategory : std::uint8_t { text = 0, button = 1, icon = 2, input = 3, background = 4 };

inline constexpr std::array<std::string_view, 5> kCategoryNames = {"text", "button", "icon", "input",
                                                                   "background"};

inline std::string_view category_name(ElementCategory c) {
    return kCategoryNames.at(static_cast<std::size_t>(c));
}

inline ElementCategory category_from_byte(std::uint8_t b) {
    if (b > static_cast<std::uint8_t>(ElementCategory::background)) {
        throw DataError("invalid element category code " + std::to_string(b));
    }
    return static_cast<ElementCategory>(b);
}

// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Box {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    friend bool operator==(const Box&, const Box&) = default;
};

struct ElementAnnotation {
    std::vector<Box> boxes;
    std::vector<ElementCategory> categories;

    void add(Box b, ElementCategory c) {
        boxes.push_back(b);
        categories.push_back(c);
    }

    // Throws DataError when boxes are degenerate or exceed the page.
    void validate(std::size_t height_px, std::size_t width_px) const {
        if (boxes.size() != categories.size()) {
            throw DataError("annotation: " + std::to_string(boxes.size()) + " boxes but " +
                            std::to_string(categories.size()) + " categories");
        }
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            const Box& b = boxes[i];
            if (b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > width_px || b.y1 > height_px) {
                throw DataError("annotation: box " + std::to_string(i) + " (" + std::to_string(b.x0) +
                                "," + std::to_string(b.y0) + "," + std::to_string(b.x1) + "," +
                                std::to_string(b.y1) + ") invalid for a " + std::to_string(width_px) +
                                "x" + std::to_string(height_px) + " page");
            }
            if (static_cast<std::uint8_t>(categories[i]) > static_cast<std::uint8_t>(ElementCategory::background)) {
                throw DataError("annotation: invalid category on box " + std::to_string(i));
            }
        }
    }

    friend bool operator==(const ElementAnnotation&, const ElementAnnotation&) = default;
};

}  // namespace uipress
