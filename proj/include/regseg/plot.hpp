#pragma once

// Training-curve plots: a dependency-free PNG canvas (zlib for the IDAT
// stream), a 5x7 pixel font for titles and tick labels, and the CSV ->
// plot_<column>.png emitter used by the plot command.

#include <zlib.h>

#include <fstream>
#include <optional>

#include "regseg/common.hpp"

namespace regseg {

struct Canvas {
    std::int64_t width = 0, height = 0;
    std::vector<unsigned char> rgb;

    Canvas(std::int64_t w, std::int64_t h) : width(w), height(h) {
        require(w > 0 && h > 0, "Canvas: dims must be positive");
        rgb.assign(static_cast<std::size_t>(w * h * 3), 255);
    }

    void set(std::int64_t x, std::int64_t y, unsigned char r, unsigned char g, unsigned char b) {
        if (x < 0 || x >= width || y < 0 || y >= height) return;
        const std::size_t i = static_cast<std::size_t>((y * width + x) * 3);
        rgb[i] = r;
        rgb[i + 1] = g;
        rgb[i + 2] = b;
    }

    void line(std::int64_t x0, std::int64_t y0, std::int64_t x1, std::int64_t y1, unsigned char r,
              unsigned char g, unsigned char b) {
        // Bresenham
        const std::int64_t dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const std::int64_t sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        std::int64_t err = dx + dy;
        for (;;) {
            set(x0, y0, r, g, b);
            if (x0 == x1 && y0 == y1) break;
            const std::int64_t e2 = 2 * err;
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

    void fill_rect(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h, unsigned char r,
                   unsigned char g, unsigned char b) {
        for (std::int64_t yy = y; yy < y + h; ++yy)
            for (std::int64_t xx = x; xx < x + w; ++xx) set(xx, yy, r, g, b);
    }

    void text(std::int64_t x, std::int64_t y, const std::string& s, unsigned char r = 0,
              unsigned char g = 0, unsigned char b = 0);
};

namespace detail {
// 5x7 glyphs, one byte per row, low 5 bits used (bit 4 = leftmost column).
struct Glyph {
    char ch;
    unsigned char rows[7];
};

inline const Glyph* find_glyph(char c) {
    static const Glyph table[] = {
        {'0', {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110}},
        {'1', {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110}},
        {'2', {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111}},
        {'3', {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110}},
        {'4', {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010}},
        {'5', {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110}},
        {'6', {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110}},
        {'7', {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000}},
        {'8', {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110}},
        {'9', {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100}},
        {'a', {0b00000, 0b00000, 0b01110, 0b00001, 0b01111, 0b10001, 0b01111}},
        {'b', {0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b11110}},
        {'c', {0b00000, 0b00000, 0b01110, 0b10000, 0b10000, 0b10001, 0b01110}},
        {'d', {0b00001, 0b00001, 0b01101, 0b10011, 0b10001, 0b10001, 0b01111}},
        {'e', {0b00000, 0b00000, 0b01110, 0b10001, 0b11111, 0b10000, 0b01110}},
        {'f', {0b00110, 0b01001, 0b01000, 0b11100, 0b01000, 0b01000, 0b01000}},
        {'g', {0b00000, 0b01111, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110}},
        {'h', {0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001}},
        {'i', {0b00100, 0b00000, 0b01100, 0b00100, 0b00100, 0b00100, 0b01110}},
        {'j', {0b00010, 0b00000, 0b00110, 0b00010, 0b00010, 0b10010, 0b01100}},
        {'k', {0b10000, 0b10000, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010}},
        {'l', {0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110}},
        {'m', {0b00000, 0b00000, 0b11010, 0b10101, 0b10101, 0b10101, 0b10101}},
        {'n', {0b00000, 0b00000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001}},
        {'o', {0b00000, 0b00000, 0b01110, 0b10001, 0b10001, 0b10001, 0b01110}},
        {'p', {0b00000, 0b00000, 0b11110, 0b10001, 0b11110, 0b10000, 0b10000}},
        {'q', {0b00000, 0b00000, 0b01101, 0b10011, 0b01111, 0b00001, 0b00001}},
        {'r', {0b00000, 0b00000, 0b10110, 0b11001, 0b10000, 0b10000, 0b10000}},
        {'s', {0b00000, 0b00000, 0b01111, 0b10000, 0b01110, 0b00001, 0b11110}},
        {'t', {0b01000, 0b01000, 0b11100, 0b01000, 0b01000, 0b01001, 0b00110}},
        {'u', {0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b10011, 0b01101}},
        {'v', {0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100}},
        {'w', {0b00000, 0b00000, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010}},
        {'x', {0b00000, 0b00000, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001}},
        {'y', {0b00000, 0b00000, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110}},
        {'z', {0b00000, 0b00000, 0b11111, 0b00010, 0b00100, 0b01000, 0b11111}},
        {'.', {0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100}},
        {'-', {0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000}},
        {'+', {0b00000, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0b00000}},
        {'_', {0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111}},
        {' ', {0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000}},
    };
    for (const auto& gl : table)
        if (gl.ch == c) return &gl;
    return nullptr;
}
}  // namespace detail

inline void Canvas::text(std::int64_t x, std::int64_t y, const std::string& s, unsigned char r,
                         unsigned char g, unsigned char b) {
    std::int64_t cx = x;
    for (char c : s) {
        const detail::Glyph* gl = detail::find_glyph(static_cast<char>(std::tolower(c)));
        if (gl != nullptr)
            for (int row = 0; row < 7; ++row)
                for (int col = 0; col < 5; ++col)
                    if (gl->rows[row] & (0b10000 >> col)) set(cx + col, y + row, r, g, b);
        cx += 6;
    }
}

namespace detail {
inline void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

inline void put_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& data) {
    put_u32_be(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + start, static_cast<uInt>(4 + data.size()));
    put_u32_be(out, static_cast<std::uint32_t>(crc));
}
}  // namespace detail

// Truecolor 8-bit PNG, filter 0 scanlines, single IDAT.
inline void write_png(const Canvas& c, const std::string& path) {
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<std::size_t>(c.height * (1 + c.width * 3)));
    for (std::int64_t y = 0; y < c.height; ++y) {
        raw.push_back(0);  // filter: none
        const auto* row = c.rgb.data() + static_cast<std::size_t>(y * c.width * 3);
        raw.insert(raw.end(), row, row + c.width * 3);
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> z(zlen);
    const int rc = compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9);
    require(rc == Z_OK, "write_png: zlib compress2 failed with code " + std::to_string(rc));
    z.resize(zlen);

    std::vector<unsigned char> out = {137, 'P', 'N', 'G', 13, 10, 26, 10};
    std::vector<unsigned char> ihdr;
    detail::put_u32_be(ihdr, static_cast<std::uint32_t>(c.width));
    detail::put_u32_be(ihdr, static_cast<std::uint32_t>(c.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolor
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // no interlace
    detail::put_chunk(out, "IHDR", ihdr);
    detail::put_chunk(out, "IDAT", z);
    detail::put_chunk(out, "IEND", {});

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os.good()) throw FormatError("write_png: cannot open \"" + path + "\" for writing");
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    os.flush();
    if (!os.good()) throw FormatError("write_png: write to \"" + path + "\" failed");
}

// ---------------------------------------------------------------------------
// Series rendering

inline void render_series(Canvas& c, const std::vector<double>& xs, const std::vector<double>& ys,
                          const std::string& title, const std::string& xlabel) {
    require(xs.size() == ys.size(), "render_series: x/y length mismatch");
    const std::int64_t L = 64, R = 16, T = 24, B = 34;
    const std::int64_t x0 = L, x1 = c.width - R, y0 = T, y1 = c.height - B;

    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (!xs.empty()) {
        xmin = *std::min_element(xs.begin(), xs.end());
        xmax = *std::max_element(xs.begin(), xs.end());
        ymin = *std::min_element(ys.begin(), ys.end());
        ymax = *std::max_element(ys.begin(), ys.end());
    }
    if (xmax - xmin < 1e-12) {
        xmin -= 1.0;
        xmax += 1.0;
    }
    if (ymax - ymin < 1e-12) {
        const double pad = std::max(0.5, std::abs(ymax) * 0.1);
        ymin -= pad;
        ymax += pad;
    } else {
        const double pad = (ymax - ymin) * 0.08;
        ymin -= pad;
        ymax += pad;
    }
    const auto px = [&](double x) {
        return x0 + static_cast<std::int64_t>(std::lround((x - xmin) / (xmax - xmin) *
                                                          static_cast<double>(x1 - x0)));
    };
    const auto py = [&](double y) {
        return y1 - static_cast<std::int64_t>(std::lround((y - ymin) / (ymax - ymin) *
                                                          static_cast<double>(y1 - y0)));
    };

    char buf[40];
    for (int i = 0; i <= 4; ++i) {  // horizontal grid + y tick labels
        const double v = ymin + (ymax - ymin) * i / 4.0;
        const std::int64_t y = py(v);
        c.line(x0, y, x1, y, 225, 225, 225);
        std::snprintf(buf, sizeof(buf), "%.4g", v);
        c.text(4, y - 3, buf);
    }
    const int xticks = std::min<int>(6, std::max<int>(1, static_cast<int>(xs.size()) - 1));
    for (int i = 0; i <= xticks; ++i) {  // vertical grid + x tick labels
        const double v = xmin + (xmax - xmin) * i / xticks;
        const std::int64_t x = px(v);
        c.line(x, y0, x, y1, 225, 225, 225);
        std::snprintf(buf, sizeof(buf), "%g", v);
        c.text(x - 6, y1 + 6, buf);
    }
    c.line(x0, y0, x0, y1, 0, 0, 0);
    c.line(x0, y1, x1, y1, 0, 0, 0);
    c.text(L, 8, title);
    c.text((x0 + x1) / 2 - 15, c.height - 14, xlabel);

    for (std::size_t i = 0; i + 1 < xs.size(); ++i)
        c.line(px(xs[i]), py(ys[i]), px(xs[i + 1]), py(ys[i + 1]), 30, 60, 160);
    for (std::size_t i = 0; i < xs.size(); ++i)
        c.fill_rect(px(xs[i]) - 1, py(ys[i]) - 1, 3, 3, 180, 40, 40);
}

// ---------------------------------------------------------------------------
// Training-log CSV parsing and plot emission

struct TrainLog {
    std::vector<std::string> columns;
    std::vector<std::vector<std::optional<double>>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return i;
        throw FormatError("training log is missing column \"" + name + "\"");
    }
};

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    cells.push_back(cur);
    for (auto& c : cells) {
        const auto a = c.find_first_not_of(" \t");
        const auto b = c.find_last_not_of(" \t");
        c = a == std::string::npos ? "" : c.substr(a, b - a + 1);
    }
    return cells;
}
}  // namespace detail

inline TrainLog parse_train_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is.good()) throw FormatError("cannot open training log \"" + path + "\"");
    std::string line;
    if (!std::getline(is, line)) throw FormatError("training log \"" + path + "\" is empty");
    TrainLog log;
    log.columns = detail::split_csv_line(line);
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != log.columns.size())
            throw FormatError("training log line " + std::to_string(lineno) + " has " +
                              std::to_string(cells.size()) + " cells, expected " +
                              std::to_string(log.columns.size()));
        std::vector<std::optional<double>> row;
        row.reserve(cells.size());
        for (const auto& cell : cells) {
            if (cell.empty()) {
                row.emplace_back(std::nullopt);
                continue;
            }
            char* endp = nullptr;
            const double v = std::strtod(cell.c_str(), &endp);
            if (endp == cell.c_str() || *endp != '\0')
                throw FormatError("training log line " + std::to_string(lineno) +
                                  ": cell \"" + cell + "\" is not a number");
            row.emplace_back(v);
        }
        log.rows.push_back(std::move(row));
    }
    return log;
}

// Emits plot_<column>.png per loss component and validation Dice series.
// Epoch-aggregate rows (empty step cell) are preferred; step rows are the
// fallback so a bare per-step log still plots.
inline std::vector<std::string> write_plots_from_csv(const std::string& csv_path,
                                                     const std::string& out_dir) {
    const TrainLog log = parse_train_csv(csv_path);
    const std::size_t epoch_col = log.column("epoch");
    const std::size_t step_col = log.column("step");
    static const char* kSeries[] = {"l_reg",  "l_kl",  "l_dice",           "l_focal",
                                    "total",  "val_dice_prostate", "val_dice_tumor"};
    std::vector<std::string> written;
    for (const char* name : kSeries) {
        const std::size_t col = log.column(name);
        std::vector<double> xs, ys;
        for (const bool epoch_rows_only : {true, false}) {
            for (const auto& row : log.rows) {
                if (!row[epoch_col] || !row[col]) continue;
                if (epoch_rows_only != !row[step_col]) continue;
                xs.push_back(*row[epoch_col]);
                ys.push_back(*row[col]);
            }
            if (!xs.empty()) break;
        }
        Canvas canvas(640, 480);
        render_series(canvas, xs, ys, std::string(name) + " vs epoch", "epoch");
        const std::string path = out_dir + "/plot_" + name + ".png";
        write_png(canvas, path);
        written.push_back(path);
    }
    return written;
}

}  // namespace regseg
