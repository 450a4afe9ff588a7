#include "spotter/scene_synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "spotter/image_io.hpp"

namespace spotter {

namespace {

// 5x7 digit glyphs, one bit per pixel, row-major top to bottom.
constexpr uint8_t kFont[10][7] = {
    {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110},  // 0
    {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110},  // 1
    {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111},  // 2
    {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110},  // 3
    {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010},  // 4
    {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110},  // 5
    {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110},  // 6
    {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000},  // 7
    {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110},  // 8
    {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100},  // 9
};
constexpr int kGlyphW = 5, kGlyphH = 7;

struct PlacedRegion {
  std::string label;
  int x0 = 0, y0 = 0, w = 0, h = 0;
  int scale = 1;
};

bool overlaps(const PlacedRegion& a, const PlacedRegion& b, int sep) {
  return a.x0 < b.x0 + b.w + sep && b.x0 < a.x0 + a.w + sep &&
         a.y0 < b.y0 + b.h + sep && b.y0 < a.y0 + a.h + sep;
}

double background_cap(const SceneSpec& spec) {
  return std::max(0.0, 1.0 - spec.contrast_margin - 0.2);
}

void render_number(std::vector<double>& canvas, int canvas_w,
                   const PlacedRegion& r, double lo, double hi, Rng& rng) {
  for (size_t d = 0; d < r.label.size(); ++d) {
    const int digit = r.label[d] - '0';
    const int gx = r.x0 + static_cast<int>(d) * (kGlyphW + 1) * r.scale;
    for (int row = 0; row < kGlyphH; ++row)
      for (int col = 0; col < kGlyphW; ++col) {
        if ((kFont[digit][row] >> (kGlyphW - 1 - col) & 1) == 0) continue;
        const double v = rng.uniform(lo, hi);
        for (int dy = 0; dy < r.scale; ++dy)
          for (int dx = 0; dx < r.scale; ++dx) {
            const int y = r.y0 + row * r.scale + dy;
            const int x = gx + col * r.scale + dx;
            canvas[static_cast<size_t>(y) * canvas_w + x] = v;
          }
      }
  }
}

}  // namespace

Placement placement_from_string(const std::string& s) {
  if (s == "centered") return Placement::Centered;
  if (s == "grid") return Placement::Grid;
  if (s == "random") return Placement::Random;
  throw ConfigError("unknown placement '" + s + "' (expected centered, grid or random)");
}

std::string to_string(Placement p) {
  switch (p) {
    case Placement::Centered: return "centered";
    case Placement::Grid: return "grid";
    default: return "random";
  }
}

std::pair<int, int> glyph_block_size(int n_digits, int scale) {
  const int w = (n_digits * (kGlyphW + 1) - 1) * scale;
  const int h = kGlyphH * scale;
  return {w, h};
}

void SceneSpec::validate() const {
  if (canvas_h < 8 || canvas_w < 8) throw ContractError("SceneSpec: canvas too small");
  if (n_regions < 1) throw ContractError("SceneSpec: n_regions must be >= 1");
  if (digits_min < 1 || digits_max < digits_min)
    throw ContractError("SceneSpec: bad digits range");
  if (scale_min < 1 || scale_max < scale_min)
    throw ContractError("SceneSpec: bad scale range");
  if (noise < 0.0 || noise > 1.0) throw ContractError("SceneSpec: noise must be in [0,1]");
  if (jitter < 0) throw ContractError("SceneSpec: jitter must be >= 0");
  if (contrast_margin <= 0.0 || contrast_margin > 0.7)
    throw ContractError("SceneSpec: contrast_margin must be in (0, 0.7]");
  const auto [w, h] = glyph_block_size(digits_max, scale_max);
  if (w > canvas_w || h > canvas_h)
    throw ContractError("SceneSpec: largest number cannot fit the canvas");
}

LabeledScene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int W = spec.canvas_w, H = spec.canvas_h;
  const double cap = background_cap(spec);

  std::vector<double> canvas(static_cast<size_t>(W) * H, 0.0);
  if (spec.noise > 0.0) {
    for (auto& v : canvas) v = spec.noise * cap * 0.8 * rng.uniform();
    // A few soft blobs give the background low-frequency structure.
    const int blobs = 2 + static_cast<int>(std::lround(4.0 * spec.noise));
    for (int b = 0; b < blobs; ++b) {
      const double cx = rng.uniform(0.0, W);
      const double cy = rng.uniform(0.0, H);
      const double sigma = rng.uniform(4.0, 12.0);
      const double amp = spec.noise * cap * rng.uniform(0.2, 0.5);
      const double inv = 1.0 / (2.0 * sigma * sigma);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          canvas[static_cast<size_t>(y) * W + x] += amp * std::exp(-d2 * inv);
        }
    }
    for (auto& v : canvas) v = std::min(v, cap);
  }

  // Draw region contents and sizes first, then place.
  std::vector<PlacedRegion> regions(static_cast<size_t>(spec.n_regions));
  for (auto& r : regions) {
    const int ndig = static_cast<int>(rng.randint(spec.digits_min, spec.digits_max));
    r.label.clear();
    for (int d = 0; d < ndig; ++d)
      r.label.push_back(static_cast<char>('0' + rng.randint(0, 9)));
    r.scale = static_cast<int>(rng.randint(spec.scale_min, spec.scale_max));
    const auto [w, h] = glyph_block_size(ndig, r.scale);
    r.w = w;
    r.h = h;
  }

  auto jitter_of = [&rng, &spec]() {
    return spec.jitter > 0 ? static_cast<int>(rng.randint(-spec.jitter, spec.jitter)) : 0;
  };

  switch (spec.placement) {
    case Placement::Centered: {
      for (auto& r : regions) {
        r.x0 = std::clamp((W - r.w) / 2 + jitter_of(), 0, W - r.w);
        r.y0 = std::clamp((H - r.h) / 2 + jitter_of(), 0, H - r.h);
      }
      if (regions.size() > 1)
        throw ContractError("generate_scene: centered placement supports one region");
      break;
    }
    case Placement::Grid: {
      const int rows = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.n_regions))));
      const int cols = (spec.n_regions + rows - 1) / rows;
      const int cell_w = W / cols, cell_h = H / rows;
      for (int k = 0; k < spec.n_regions; ++k) {
        auto& r = regions[static_cast<size_t>(k)];
        if (r.w > cell_w || r.h > cell_h)
          throw ContractError("generate_scene: number does not fit its grid cell");
        const int cr = k / cols, cc = k % cols;
        const int bx = cc * cell_w, by = cr * cell_h;
        r.x0 = std::clamp(bx + (cell_w - r.w) / 2 + jitter_of(), bx, bx + cell_w - r.w);
        r.y0 = std::clamp(by + (cell_h - r.h) / 2 + jitter_of(), by, by + cell_h - r.h);
      }
      break;
    }
    case Placement::Random: {
      const int max_attempts = 200 * spec.n_regions;
      std::vector<PlacedRegion> placed;
      int attempts = 0;
      for (auto& r : regions) {
        bool ok = false;
        while (attempts++ < max_attempts) {
          r.x0 = static_cast<int>(rng.randint(1, std::max(1, W - r.w - 1)));
          r.y0 = static_cast<int>(rng.randint(1, std::max(1, H - r.h - 1)));
          ok = true;
          for (const auto& p : placed)
            if (overlaps(r, p, 2)) {
              ok = false;
              break;
            }
          if (ok) break;
        }
        if (!ok)
          throw ContractError("generate_scene: could not place " +
                              std::to_string(spec.n_regions) +
                              " non-overlapping regions after " +
                              std::to_string(max_attempts) + " attempts");
        placed.push_back(r);
      }
      break;
    }
  }

  // Reading order: top-to-bottom, then left-to-right.
  std::sort(regions.begin(), regions.end(), [](const PlacedRegion& a, const PlacedRegion& b) {
    return a.y0 != b.y0 ? a.y0 < b.y0 : a.x0 < b.x0;
  });

  const double glyph_lo = std::min(1.0, cap + spec.contrast_margin + 0.02);
  LabeledScene scene;
  for (const auto& r : regions) {
    render_number(canvas, W, r, glyph_lo, 1.0, rng);
    scene.labels.push_back(r.label);
    scene.boxes.push_back({static_cast<double>(r.x0), static_cast<double>(r.y0),
                           static_cast<double>(r.x0 + r.w - 1),
                           static_cast<double>(r.y0 + r.h - 1)});
  }

  // Quantise to the 8-bit grid so PNG round trips are bit-exact.
  std::vector<scalar> pixels(canvas.size());
  for (size_t i = 0; i < canvas.size(); ++i)
    pixels[i] = static_cast<scalar>(std::lround(canvas[i] * 255.0) / 255.0);
  scene.image = Tensor::from_data({1, H, W}, std::move(pixels));
  return scene;
}

namespace {

void write_split(const SceneSpec& spec, int first_index, int count,
                 const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream labels(dir / "labels.jsonl", std::ios::trunc);
  if (!labels) throw DataError("cannot write labels file in " + dir.string());
  for (int i = 0; i < count; ++i) {
    SceneSpec item = spec;
    item.seed = mix_seed(spec.seed, static_cast<uint64_t>(first_index + i));
    const LabeledScene scene = generate_scene(item);
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.png", i);
    write_png((dir / "images" / name).string(), tensor_to_image(scene.image));

    nlohmann::json line;
    line["image"] = std::string("images/") + name;
    line["labels"] = scene.labels;
    line["boxes"] = scene.boxes;
    labels << line.dump() << '\n';
  }
  if (!labels) throw DataError("write failure in " + dir.string());
}

}  // namespace

std::array<int, 3> make_dataset(const SceneSpec& spec, int count,
                                const std::array<double, 3>& split_fractions,
                                const std::string& out_dir) {
  spec.validate();
  if (count < 1) throw ContractError("make_dataset: count must be >= 1");
  const double total = split_fractions[0] + split_fractions[1] + split_fractions[2];
  if (std::abs(total - 1.0) > 1e-9)
    throw ContractError("make_dataset: split fractions must sum to 1");

  const int n_train = static_cast<int>(std::lround(split_fractions[0] * count));
  const int n_val = static_cast<int>(std::lround(split_fractions[1] * count));
  const int n_test = count - n_train - n_val;
  if (n_train < 0 || n_val < 0 || n_test < 0)
    throw ContractError("make_dataset: split rounding produced a negative count");

  const std::filesystem::path root(out_dir);
  write_split(spec, 0, n_train, root / "train");
  write_split(spec, n_train, n_val, root / "val");
  write_split(spec, n_train + n_val, n_test, root / "test");
  return {n_train, n_val, n_test};
}

}  // namespace spotter
