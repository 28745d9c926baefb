#pragma once

// Binary PGM (P5, 8-bit) image I/O and small CSV helpers. PGM is the image
// format of record for exported phantoms and samples.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cdm/tensor.hpp"

namespace cdm {

// Accepts [h,w], [1,h,w] or [1,1,h,w]; values clamped to [0,1] and quantized
// to 8 bits.
inline void write_pgm(const std::string& path, const Tensor& img) {
    int h = 0, w = 0;
    if (img.rank() == 2) {
        h = img.shape()[0];
        w = img.shape()[1];
    } else if (img.rank() == 3 && img.shape()[0] == 1) {
        h = img.shape()[1];
        w = img.shape()[2];
    } else if (img.rank() == 4 && img.shape()[0] == 1 && img.shape()[1] == 1) {
        h = img.shape()[2];
        w = img.shape()[3];
    } else {
        throw std::invalid_argument("write_pgm: expected a single-channel image, got " + shape_str(img.shape()));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    out << "P5\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(w));
    const float* p = img.data();
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            float v = p[static_cast<int64_t>(i) * w + j];
            v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
            row[static_cast<size_t>(j)] = static_cast<uint8_t>(v * 255.0f + 0.5f);
        }
        out.write(reinterpret_cast<const char*>(row.data()), w);
    }
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

// Returns [1,1,h,w] with values in [0,1].
inline Tensor read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw std::runtime_error("read_pgm: " + path + " is not a binary PGM (P5)");
    auto next_int = [&in, &path] {
        // Skip whitespace and '#' comment lines between header fields.
        for (;;) {
            const int c = in.peek();
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        int v = -1;
        in >> v;
        if (!in || v < 0) throw std::runtime_error("read_pgm: bad header in " + path);
        return v;
    };
    const int w = next_int();
    const int h = next_int();
    const int maxval = next_int();
    if (maxval != 255) throw std::runtime_error("read_pgm: only maxval 255 supported, got " + std::to_string(maxval));
    in.get(); // single whitespace after header
    std::vector<uint8_t> buf(static_cast<size_t>(h) * w);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw std::runtime_error("read_pgm: truncated pixel data in " + path);
    Tensor img({1, 1, h, w});
    for (size_t i = 0; i < buf.size(); ++i) img.data()[i] = static_cast<float>(buf[i]) / 255.0f;
    return img;
}

// Minimal CSV writer: caller supplies the header once and rows as value
// lists. Values are written as-is (no quoting; fields in this repo never
// contain commas).
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::string& header) : out_(path) {
        if (!out_) throw std::runtime_error("CsvWriter: cannot open " + path);
        out_ << header << "\n";
    }

    void row(const std::vector<std::string>& fields) {
        for (size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << fields[i];
        out_ << "\n";
    }

    void flush() { out_.flush(); }

private:
    std::ofstream out_;
};

inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_csv: cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        rows.push_back(std::move(fields));
    }
    return rows;
}

} // namespace cdm
