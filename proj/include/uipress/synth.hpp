#pragma once

// Synthetic (screenshot, annotation, markup) triples.
//
// Markup is a tiny page DSL, linearized as
//   PAGE <bg> ( ROW ( <kind> <color> <span> )+ )* END
// Rows split the page height evenly; each row is kRowUnits units wide and its
// cell spans sum to exactly kRowUnits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uipress/errors.hpp"
#include "uipress/serialize.hpp"
#include "uipress/types.hpp"

namespace uipress {

namespace vocab {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kPromptFirst = 3;  // 4 fixed prompt tokens
inline constexpr int kPage = 7;
inline constexpr int kEnd = 8;
inline constexpr int kRow = 9;
inline constexpr int kKindFirst = 10;  // text, button, icon, input
inline constexpr int kColorFirst = 14;  // 8 palette colors
inline constexpr int kSpanFirst = 22;  // span1 .. span4
inline constexpr int kSize = 26;

inline constexpr std::array<std::string_view, kSize> kNames = {
    "<pad>", "<bos>", "<eos>", "<convert>", "<screenshot>", "<to>", "<markup>", "PAGE", "END", "ROW",
    "text", "button", "icon", "input", "white", "black", "red", "green", "blue", "yellow", "purple",
    "orange", "span1", "span2", "span3", "span4"};

inline const std::vector<int>& prompt() {
    static const std::vector<int> p{kPromptFirst, kPromptFirst + 1, kPromptFirst + 2, kPromptFirst + 3};
    return p;
}

inline void write_sidecar(const std::string& path) {
    std::ofstream os(path);
    if (!os) {
        throw DataError("cannot open '" + path + "' for writing");
    }
    for (auto name : kNames) os << name << '\n';
}

}  // namespace vocab

inline constexpr std::size_t kPaletteSize = 8;
inline constexpr std::size_t kRowUnits = 4;
inline constexpr std::size_t kMaxRows = 6;
inline constexpr int kBorderColor = 1;  // black

inline constexpr std::array<std::array<std::uint8_t, 3>, kPaletteSize> kPalette = {{
    {255, 255, 255},
    {0, 0, 0},
    {220, 40, 40},
    {40, 170, 70},
    {40, 90, 220},
    {240, 200, 40},
    {140, 60, 180},
    {240, 130, 30},
}};

struct MarkupCell {
    ElementCategory kind = ElementCategory::text;
    int color = 0;
    int span = 1;
    friend bool operator==(const MarkupCell&, const MarkupCell&) = default;
};

struct MarkupRow {
    std::vector<MarkupCell> cells;
    friend bool operator==(const MarkupRow&, const MarkupRow&) = default;
};

struct MarkupProgram {
    int background = 0;
    std::vector<MarkupRow> rows;
    friend bool operator==(const MarkupProgram&, const MarkupProgram&) = default;
};

enum class PageType : std::uint8_t { text_heavy = 0, layout_rich = 1, image_heavy = 2, complex = 3 };

inline constexpr std::array<std::string_view, 4> kPageTypeNames = {"text-heavy", "layout-rich", "image-heavy",
                                                                   "complex"};

inline std::string_view page_type_name(PageType t) { return kPageTypeNames.at(static_cast<std::size_t>(t)); }

struct SyntheticSample {
    PageImage image;
    ElementAnnotation annotation;
    MarkupProgram markup;
    PageType page_type = PageType::complex;
    friend bool operator==(const SyntheticSample&, const SyntheticSample&) = default;
};

struct GenConfig {
    std::size_t height_px = 32;
    std::size_t width_px = 32;
    std::size_t patch_size = 2;
    std::size_t min_rows = 1;
    std::size_t max_rows = kMaxRows;
    std::size_t max_cells = 4;
};

// ---------------------------------------------------------------------------
// Linearization and parsing

inline std::vector<int> linearize(const MarkupProgram& p) {
    std::vector<int> ids{vocab::kPage, vocab::kColorFirst + p.background};
    for (const auto& row : p.rows) {
        ids.push_back(vocab::kRow);
        for (const auto& c : row.cells) {
            ids.push_back(vocab::kKindFirst + static_cast<int>(c.kind));
            ids.push_back(vocab::kColorFirst + c.color);
            ids.push_back(vocab::kSpanFirst + c.span - 1);
        }
    }
    ids.push_back(vocab::kEnd);
    return ids;
}

// Markup ids followed by EOS: the decoder's training target.
inline std::vector<int> target_sequence(const MarkupProgram& p) {
    auto ids = linearize(p);
    ids.push_back(vocab::kEos);
    return ids;
}

struct ParseResult {
    MarkupProgram program;
    bool valid = false;
};

// Longest valid prefix. Tokens after the first EOS are ignored; a row is kept
// only when complete. Anything dropped, or a missing END, marks the parse invalid.
inline ParseResult parse_lenient(std::span<const int> tokens) {
    const auto eos = std::find(tokens.begin(), tokens.end(), vocab::kEos);
    tokens = tokens.first(static_cast<std::size_t>(eos - tokens.begin()));
    auto is_color = [](int t) { return t >= vocab::kColorFirst && t < vocab::kColorFirst + static_cast<int>(kPaletteSize); };
    auto is_kind = [](int t) { return t >= vocab::kKindFirst && t < vocab::kKindFirst + 4; };
    auto is_span = [](int t) { return t >= vocab::kSpanFirst && t < vocab::kSpanFirst + static_cast<int>(kRowUnits); };

    ParseResult result;
    if (tokens.size() < 2 || tokens[0] != vocab::kPage || !is_color(tokens[1])) {
        return result;
    }
    result.program.background = tokens[1] - vocab::kColorFirst;
    std::size_t pos = 2;
    while (pos < tokens.size()) {
        const int t = tokens[pos];
        if (t == vocab::kEnd) {
            result.valid = pos + 1 == tokens.size();
            return result;
        }
        if (t != vocab::kRow || result.program.rows.size() >= kMaxRows) {
            return result;
        }
        MarkupRow row;
        std::size_t units = 0;
        std::size_t p = pos + 1;
        while (units < kRowUnits) {
            if (p + 3 > tokens.size() || !is_kind(tokens[p]) || !is_color(tokens[p + 1]) || !is_span(tokens[p + 2])) {
                return result;
            }
            const int span = tokens[p + 2] - vocab::kSpanFirst + 1;
            if (units + static_cast<std::size_t>(span) > kRowUnits) {
                return result;
            }
            row.cells.push_back({static_cast<ElementCategory>(tokens[p] - vocab::kKindFirst),
                                 tokens[p + 1] - vocab::kColorFirst, span});
            units += static_cast<std::size_t>(span);
            p += 3;
        }
        result.program.rows.push_back(std::move(row));
        pos = p;
    }
    return result;  // missing END
}

// ---------------------------------------------------------------------------
// Rendering

inline double palette_channel(int color, std::size_t ch) { return kPalette.at(static_cast<std::size_t>(color))[ch] / 255.0; }

inline void check_render_dims(std::size_t height_px, std::size_t width_px) {
    if (height_px < kMaxRows || width_px < kRowUnits || width_px % kRowUnits != 0) {
        throw ConfigError("page " + std::to_string(height_px) + "x" + std::to_string(width_px) +
                          " makes cells smaller than 1 px (need height >= " + std::to_string(kMaxRows) +
                          " and width a positive multiple of " + std::to_string(kRowUnits) + ")");
    }
}

// Pixel rectangles of every cell, row-major, paired with the cell.
inline std::vector<std::pair<Box, MarkupCell>> layout_cells(const MarkupProgram& p, std::size_t height_px,
                                                            std::size_t width_px) {
    std::vector<std::pair<Box, MarkupCell>> out;
    const std::size_t n = p.rows.size();
    const std::size_t unit = width_px / kRowUnits;
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t y0 = r * height_px / n, y1 = (r + 1) * height_px / n;
        std::size_t offset = 0;
        for (const auto& c : p.rows[r].cells) {
            const auto span = static_cast<std::size_t>(c.span);
            out.push_back({Box{offset * unit, y0, (offset + span) * unit, y1}, c});
            offset += span;
        }
    }
    return out;
}

inline PageImage render(const MarkupProgram& p, std::size_t height_px, std::size_t width_px) {
    check_render_dims(height_px, width_px);
    PageImage img(height_px, width_px);
    auto paint = [&](std::size_t y, std::size_t x, int color) {
        for (std::size_t ch = 0; ch < PageImage::channels; ++ch) img.at(y, x, ch) = palette_channel(color, ch);
    };
    for (std::size_t y = 0; y < height_px; ++y)
        for (std::size_t x = 0; x < width_px; ++x) paint(y, x, p.background);

    for (const auto& [b, c] : layout_cells(p, height_px, width_px)) {
        const std::size_t w = b.x1 - b.x0, h = b.y1 - b.y0;
        switch (c.kind) {
            case ElementCategory::text:
                for (std::size_t y = b.y0; y < b.y1; y += 2)
                    for (std::size_t x = b.x0; x < b.x1; ++x) paint(y, x, c.color);
                break;
            case ElementCategory::button:
                for (std::size_t y = b.y0; y < b.y1; ++y)
                    for (std::size_t x = b.x0; x < b.x1; ++x) {
                        const bool edge = y == b.y0 || y + 1 == b.y1 || x == b.x0 || x + 1 == b.x1;
                        paint(y, x, edge ? kBorderColor : c.color);
                    }
                break;
            case ElementCategory::icon: {
                const std::size_t side = std::max<std::size_t>(1, std::min(w, h) / 2);
                const std::size_t ox = b.x0 + (w - side) / 2, oy = b.y0 + (h - side) / 2;
                for (std::size_t y = oy; y < oy + side; ++y)
                    for (std::size_t x = ox; x < ox + side; ++x) paint(y, x, c.color);
                break;
            }
            case ElementCategory::input:
                for (std::size_t y = b.y0; y < b.y1; ++y)
                    for (std::size_t x = b.x0; x < b.x1; ++x) {
                        if (y == b.y0 || y + 1 == b.y1 || x == b.x0 || x + 1 == b.x1) paint(y, x, c.color);
                    }
                break;
            case ElementCategory::background:
                break;
        }
    }
    return img;
}

inline ElementAnnotation annotate(const MarkupProgram& p, std::size_t height_px, std::size_t width_px) {
    ElementAnnotation ann;
    for (const auto& [b, c] : layout_cells(p, height_px, width_px)) ann.add(b, c.kind);
    return ann;
}

// 1 - mean absolute channel difference.
inline double similarity(const PageImage& a, const PageImage& b) {
    if (a.height_px != b.height_px || a.width_px != b.width_px) {
        throw DimensionError("similarity: image sizes differ (" + std::to_string(a.height_px) + "x" +
                             std::to_string(a.width_px) + " vs " + std::to_string(b.height_px) + "x" +
                             std::to_string(b.width_px) + ")");
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) diff += std::abs(a.pixels[i] - b.pixels[i]);
    return 1.0 - diff / static_cast<double>(a.pixels.size());
}

// ---------------------------------------------------------------------------
// Generation

inline SyntheticSample gen_sample(std::uint64_t seed, const GenConfig& cfg) {
    check_render_dims(cfg.height_px, cfg.width_px);
    if (cfg.patch_size == 0 || cfg.height_px % cfg.patch_size != 0 || cfg.width_px % cfg.patch_size != 0) {
        throw ConfigError("gen_sample: page size not divisible by patch size " + std::to_string(cfg.patch_size));
    }
    if (cfg.min_rows > cfg.max_rows || cfg.max_rows > kMaxRows || cfg.max_cells == 0 || cfg.max_cells > kRowUnits) {
        throw ConfigError("gen_sample: invalid row/cell limits");
    }
    std::mt19937_64 rng(seed);
    auto uniform = [&](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    SyntheticSample s;
    s.page_type = static_cast<PageType>(uniform(0, 3));

    std::array<double, 4> kind_weights{};
    std::size_t min_cells = 1, max_cells = cfg.max_cells, min_rows = cfg.min_rows;
    switch (s.page_type) {
        case PageType::text_heavy:
            kind_weights = {0.7, 0.1, 0.1, 0.1};
            max_cells = std::min<std::size_t>(max_cells, 2);
            break;
        case PageType::layout_rich:
            kind_weights = {0.3, 0.3, 0.2, 0.2};
            min_rows = std::max<std::size_t>(min_rows, std::min<std::size_t>(3, cfg.max_rows));
            min_cells = std::min<std::size_t>(2, max_cells);
            break;
        case PageType::image_heavy:
            kind_weights = {0.2, 0.1, 0.6, 0.1};
            min_cells = std::min<std::size_t>(2, max_cells);
            break;
        case PageType::complex:
            kind_weights = {0.25, 0.25, 0.25, 0.25};
            break;
    }
    std::discrete_distribution<int> kind_dist(kind_weights.begin(), kind_weights.end());

    MarkupProgram& p = s.markup;
    p.background = uniform(0, 1) == 0 ? 0 : static_cast<int>(uniform(0, kPaletteSize - 1));
    const std::size_t rows = uniform(min_rows, cfg.max_rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t cells = uniform(min_cells, max_cells);
        // Choose cells-1 distinct cut points in {1, .., kRowUnits-1}.
        std::vector<std::size_t> cuts{1, 2, 3};
        std::shuffle(cuts.begin(), cuts.end(), rng);
        cuts.resize(cells - 1);
        cuts.push_back(0);
        cuts.push_back(kRowUnits);
        std::sort(cuts.begin(), cuts.end());
        MarkupRow row;
        for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
            MarkupCell cell;
            cell.kind = static_cast<ElementCategory>(kind_dist(rng));
            auto color = static_cast<int>(uniform(0, kPaletteSize - 2));
            cell.color = color >= p.background ? color + 1 : color;
            cell.span = static_cast<int>(cuts[c + 1] - cuts[c]);
            row.cells.push_back(cell);
        }
        p.rows.push_back(std::move(row));
    }
    s.image = render(p, cfg.height_px, cfg.width_px);
    s.annotation = annotate(p, cfg.height_px, cfg.width_px);
    return s;
}

// Sample i uses seed (base_seed, i) mixed so neighbouring indices decorrelate.
inline std::uint64_t sample_seed(std::uint64_t base_seed, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(base_seed), static_cast<std::uint32_t>(base_seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline std::vector<SyntheticSample> gen_dataset(std::uint64_t seed, std::size_t count, const GenConfig& cfg) {
    std::vector<SyntheticSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(gen_sample(sample_seed(seed, i), cfg));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset files
//
//   magic "UIDS" | u32 version | u32 count | u32 height | u32 width | u32 vocab
//   per sample:
//     u8 page_type
//     pixels: height*width*3 bytes, value = byte/255
//     u32 box_count | box_count x (u32 x0, y0, x1, y1) | box_count x u8 category
//     u32 markup_len | markup_len x u32 token id

inline constexpr std::uint32_t kDatasetVersion = 1;

struct Dataset {
    std::size_t height_px = 0;
    std::size_t width_px = 0;
    std::vector<SyntheticSample> samples;
};

inline void write_dataset(std::ostream& os, const Dataset& ds) {
    os.write("UIDS", 4);
    io::write_le<std::uint32_t>(os, kDatasetVersion);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.samples.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.height_px));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.width_px));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(vocab::kSize));
    for (const auto& s : ds.samples) {
        if (s.image.height_px != ds.height_px || s.image.width_px != ds.width_px) {
            throw DataError("write_dataset: sample size differs from dataset header");
        }
        io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(s.page_type));
        for (double v : s.image.pixels) {
            const double scaled = std::round(v * 255.0);
            if (scaled < 0.0 || scaled > 255.0 || scaled / 255.0 != v) {
                throw DataError("write_dataset: pixel value " + std::to_string(v) + " is not a multiple of 1/255");
            }
            io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(scaled));
        }
        io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.annotation.boxes.size()));
        for (const auto& b : s.annotation.boxes) {
            for (auto v : {b.x0, b.y0, b.x1, b.y1}) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
        }
        for (auto c : s.annotation.categories) io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(c));
        const auto ids = linearize(s.markup);
        io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ids.size()));
        for (int id : ids) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(id));
    }
}

inline Dataset read_dataset(std::istream& is) {
    io::expect_magic(is, "UIDS", "dataset");
    const auto version = io::read_le<std::uint32_t>(is);
    if (version != kDatasetVersion) {
        throw DataError("dataset: unsupported version " + std::to_string(version));
    }
    const auto count = io::read_le<std::uint32_t>(is);
    Dataset ds;
    ds.height_px = io::read_le<std::uint32_t>(is);
    ds.width_px = io::read_le<std::uint32_t>(is);
    const auto vocab_size = io::read_le<std::uint32_t>(is);
    if (vocab_size != static_cast<std::uint32_t>(vocab::kSize)) {
        throw DataError("dataset: vocabulary size " + std::to_string(vocab_size) + " does not match " +
                        std::to_string(vocab::kSize));
    }
    check_render_dims(ds.height_px, ds.width_px);
    ds.samples.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        SyntheticSample s;
        const auto type = io::read_le<std::uint8_t>(is);
        if (type > 3) {
            throw DataError("dataset: sample " + std::to_string(i) + " has invalid page type");
        }
        s.page_type = static_cast<PageType>(type);
        s.image = PageImage(ds.height_px, ds.width_px);
        for (auto& v : s.image.pixels) v = io::read_le<std::uint8_t>(is) / 255.0;
        const auto boxes = io::read_le<std::uint32_t>(is);
        for (std::uint32_t b = 0; b < boxes; ++b) {
            Box box;
            box.x0 = io::read_le<std::uint32_t>(is);
            box.y0 = io::read_le<std::uint32_t>(is);
            box.x1 = io::read_le<std::uint32_t>(is);
            box.y1 = io::read_le<std::uint32_t>(is);
            s.annotation.boxes.push_back(box);
        }
        for (std::uint32_t b = 0; b < boxes; ++b) {
            s.annotation.categories.push_back(category_from_byte(io::read_le<std::uint8_t>(is)));
        }
        s.annotation.validate(ds.height_px, ds.width_px);
        const auto len = io::read_le<std::uint32_t>(is);
        if (len > (1u << 20)) {
            throw DataError("dataset: markup length " + std::to_string(len) + " is implausible");
        }
        std::vector<int> ids(len);
        for (auto& id : ids) id = static_cast<int>(io::read_le<std::uint32_t>(is));
        auto parsed = parse_lenient(ids);
        if (!parsed.valid) {
            throw DataError("dataset: sample " + std::to_string(i) + " carries malformed markup");
        }
        s.markup = std::move(parsed.program);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    write_dataset(os, ds);
    if (!os) throw DataError("write to '" + path + "' failed");
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open dataset '" + path + "'");
    return read_dataset(is);
}

}  // namespace uipress
