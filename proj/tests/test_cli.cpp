#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "skc/dataset.hpp"
#include "skc/image.hpp"

using namespace skc;
namespace fs = std::filesystem;

namespace {

const std::string kCli = SKC_CLI_PATH;

int run(const std::string& args) {
  std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<uint8_t> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), {});
}

// micro data flags shared by the CLI tests
const std::string kMicroData =
    " --set data.frames=2 --set data.height=32 --set data.width=32"
    " --set data.shapes_max=1 --set data.image_clips=1";

}  // namespace

TEST_CASE("gen-data determinism, index, and seed sensitivity") {
  auto root = fresh_dir("skc_cli_gen");
  auto a = root / "a", b = root / "b", c = root / "c";
  REQUIRE(run("gen-data --out " + a.string() + " --clips 3" + kMicroData) == 0);
  REQUIRE(run("gen-data --out " + b.string() + " --clips 3" + kMicroData) == 0);
  REQUIRE(run("gen-data --out " + c.string() + " --clips 3 --set seed=43" +
              kMicroData) == 0);

  auto names = read_index(a);
  REQUIRE(names.size() == 3);
  bool diff_seed_changed = false;
  for (const auto& name : names)
    for (const auto& entry : fs::directory_iterator(a / name)) {
      auto rel = entry.path().filename();
      REQUIRE(file_bytes(entry.path()) == file_bytes(b / name / rel));
      if (file_bytes(entry.path()) != file_bytes(c / name / rel))
        diff_seed_changed = true;
    }
  REQUIRE(diff_seed_changed);
}

TEST_CASE("unknown config keys exit with the validation code") {
  auto root = fresh_dir("skc_cli_badkey");
  REQUIRE(run("gen-data --out " + (root / "x").string() +
              " --clips 1 --set data.heihgt=32") == 2);
  // malformed --set
  REQUIRE(run("gen-data --out " + (root / "y").string() +
              " --clips 1 --set data.height") == 2);
}

TEST_CASE("rope-inspect emits the fixed header and correct frequencies") {
  auto root = fresh_dir("skc_cli_rope");
  auto csv = root / "rope.csv";

  SECTION("explicit motion statistics") {
    REQUIRE(run("rope-inspect --m-global 0.5 --m-v 0.2 --m-u 1.0 --positions 4 --out " +
                csv.string()) == 0);
    std::ifstream f(csv);
    std::string header;
    std::getline(f, header);
    REQUIRE(header == "axis,band,position,angle,cos,sin");
    // find band-0 position-1 rows per axis: angle == scaled base frequency
    std::map<std::string, double> band0_freq;
    std::string line;
    while (std::getline(f, line)) {
      std::istringstream is(line);
      std::string axis, band, pos, angle;
      std::getline(is, axis, ',');
      std::getline(is, band, ',');
      std::getline(is, pos, ',');
      std::getline(is, angle, ',');
      if (band == "0" && pos == "1") band0_freq[axis] = std::stod(angle);
    }
    REQUIRE(band0_freq.at("width") == Catch::Approx(1.3).margin(1e-9));
    REQUIRE(band0_freq.at("height") == Catch::Approx(1.06).margin(1e-9));
    REQUIRE(band0_freq.at("time") == Catch::Approx(1.05).margin(1e-9));
  }

  SECTION("zero stats reproduce the static table") {
    auto zero_csv = root / "zero.csv";
    auto low_csv = root / "low.csv";
    REQUIRE(run("rope-inspect --m-global 0 --m-v 0 --m-u 0 --positions 8 --out " +
                zero_csv.string()) == 0);
    // sub-threshold stats fall back to the same static table
    REQUIRE(run("rope-inspect --m-global 0.05 --m-v 0.02 --m-u 0.09 --positions 8 --out " +
                low_csv.string()) == 0);
    REQUIRE(file_bytes(zero_csv) == file_bytes(low_csv));
  }

  SECTION("missing inputs fail validation") {
    REQUIRE(run("rope-inspect --m-global 0.5 --out " + csv.string()) == 2);
  }
}

TEST_CASE("flow-viz writes csv and ppm for a translated disc") {
  auto root = fresh_dir("skc_cli_flow");
  // textured frame pair rendered via the dataset painter
  Image a(64, 64, 3, 1.0f), b(64, 64, 3, 1.0f);
  ShapeSpec s;
  s.kind = ShapeKind::disc;
  s.color_index = 0;
  s.size = 12;
  s.tex_kx = 0.8f;
  s.tex_ky = 0.3f;
  dataset_detail::paint_shape(a, s, 30, 32, nullptr, 0);
  dataset_detail::paint_shape(b, s, 33, 32, nullptr, 0);
  write_ppm(root / "a.ppm", a);
  write_ppm(root / "b.ppm", b);
  auto csv = root / "flow.csv";
  auto ppm = root / "flow.ppm";
  REQUIRE(run("flow-viz --a " + (root / "a.ppm").string() + " --b " +
              (root / "b.ppm").string() + " --csv " + csv.string() + " --ppm " +
              ppm.string()) == 0);
  std::ifstream f(csv);
  std::string header;
  std::getline(f, header);
  REQUIRE(header == "x,y,u,v");
  REQUIRE(fs::exists(ppm));
  Image viz = read_ppm(ppm);
  REQUIRE(viz.h == 64);
  // rows: count matches the grid
  int rows = 0;
  std::string line;
  while (std::getline(f, line)) rows += !line.empty();
  REQUIRE(rows == 64 * 64);
}

TEST_CASE("cli end-to-end: codec, train, sample, eval") {
  auto root = fresh_dir("skc_cli_e2e");
  auto data = root / "data";
  std::string micro_model =
      " --set codec.kind=identity --set model.depth=1 --set model.heads=2"
      " --set model.d=24 --set model.ffn_mult=2 --set model.phys_patch=8"
      " --set model.phys_hidden=16 --set schedule.t_train=50"
      " --set train.steps=4 --set train.checkpoint_every=2";
  REQUIRE(run("gen-data --out " + data.string() + " --clips 2" + kMicroData) == 0);
  REQUIRE(run("train-codec --dataset " + data.string() + " --out " +
              (root / "codec").string() + " --set codec.kind=identity") == 0);
  REQUIRE(run("train --dataset " + data.string() + " --codec " +
              (root / "codec").string() + " --out " + (root / "run").string() +
              micro_model + kMicroData) == 0);
  REQUIRE(fs::exists(root / "run" / "final" / "manifest.txt"));
  REQUIRE(fs::exists(root / "run" / "config.txt"));
  {
    std::ifstream f(root / "run" / "train_log.csv");
    std::string line;
    int rows = -1;  // header
    while (std::getline(f, line)) rows += !line.empty();
    REQUIRE(rows == 4);
  }

  // sample the image clip (single sketch -> single frame), twice for identity
  auto clip = data / "clip_001";
  std::string caption;
  {
    std::ifstream f(clip / "caption.txt");
    std::getline(f, caption);
  }
  auto out1 = root / "gen1", out2 = root / "gen2";
  std::string sample_cmd = "sample --checkpoint " + (root / "run/final").string() +
                           " --sketches " + clip.string() + " --refs " +
                           clip.string() + " --caption \"" + caption +
                           "\" --steps 3 --seed 5 --out ";
  REQUIRE(run(sample_cmd + out1.string()) == 0);
  REQUIRE(run(sample_cmd + out2.string()) == 0);
  REQUIRE(fs::exists(out1 / "frame_000.ppm"));
  REQUIRE(!fs::exists(out1 / "frame_001.ppm"));  // M=1 -> exactly one frame
  REQUIRE(file_bytes(out1 / "frame_000.ppm") == file_bytes(out2 / "frame_000.ppm"));
  REQUIRE(fs::exists(out1 / "manifest.txt"));

  // eval: generated dir == reference frames gives ssim 1 / psnr inf
  auto gen = root / "geneval";
  auto names = read_index(data);
  for (const auto& name : names) {
    fs::create_directories(gen / name);
    for (const auto& entry : fs::directory_iterator(data / name)) {
      auto fn = entry.path().filename().string();
      if (fn.rfind("frame_", 0) == 0) fs::copy_file(entry.path(), gen / name / fn);
    }
  }
  fs::copy_file(data / "index.txt", gen / "index.txt");
  auto metrics = root / "metrics.csv";
  REQUIRE(run("eval --generated " + gen.string() + " --reference " + data.string() +
              " --out " + metrics.string()) == 0);
  std::ifstream f(metrics);
  std::string header, row;
  std::getline(f, header);
  REQUIRE(header == "clip,ssim,psnr,t_consist");
  std::getline(f, row);
  REQUIRE(row.find("clip_000,1,inf") == 0);

  // missing sketches directory is an input validation error
  REQUIRE(run("sample --checkpoint " + (root / "run/final").string() +
              " --sketches " + (root / "nosuch").string() + " --refs " +
              clip.string() + " --caption \"" + caption + "\" --out " +
              (root / "bad").string()) == 2);
}
