#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <unistd.h>

#include "dnet/commands.hpp"
#include "dnet/io.hpp"

namespace fs = std::filesystem;
using dnet::Tensor;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dnet_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& name) const { return path / name; }
};

std::string bytes_of(const fs::path& p) { return dnet::io::read_text(p); }

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

dnet::ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const dnet::Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return dnet::ErrorCode::graph;
}

const char* kTinyConfig =
    "# tiny run\n"
    "d1 = 1\nd2 = 2\nd3 = 4\n"
    "msif = on\nmsif_rates = 3,6,12\n"
    "lr = 3e-4\npower = 0.9\nmax_iter = 6\nbatch = 2\n"
    "lambda = 1e-4\nbeta = 1\nseed = 5\n"
    "channels_scale = 1/8\n";

}  // namespace

TEST_CASE("pgm byte arithmetic") {
  const std::string raw = std::string("P5\n2 2\n255\n") + '\x00' + '\xff' + '\x80' + '\x40';
  std::istringstream in(raw);
  const auto t = dnet::io::read_pnm(in);
  CHECK(t.shape() == dnet::Shape{1, 2, 2, 1});
  CHECK(t[0] == 0.0f);
  CHECK(t[1] == 1.0f);
  CHECK(t[2] == doctest::Approx(128.0 / 255).epsilon(1e-7));
  CHECK(t[3] == doctest::Approx(64.0 / 255).epsilon(1e-7));
  CHECK(t[2] == doctest::Approx(0.50196).epsilon(1e-5));
  CHECK(t[3] == doctest::Approx(0.25098).epsilon(1e-5));
}

TEST_CASE("pnm header variants and errors") {
  {
    // Comments between fields and 16-bit big-endian samples.
    std::istringstream in(std::string("P5 # c\n1 # w\n1\n65535\n") + '\x80' + '\x00');
    CHECK(dnet::io::read_pnm(in)[0] == static_cast<float>(32768.0 / 65535));
  }
  auto parse = [](const std::string& s) {
    std::istringstream in(s);
    return dnet::io::read_pnm(in);
  };
  const std::vector<std::string> bad{
      "",
      "P2\n1 1\n255\n0",
      "P6\n1 1\n1000\n" + std::string(6, '\0'),
      "P6\n1 1\n100\n" + std::string(3, '\0'),
      "P5\n2 2\n255\n\x01\x02",
      "P5\n2",
      "P5\nx 2\n255\n",
      "P5\n0 2\n255\n",
      "P5\n1 1\n0\n\x00",
      "P5\n1 1\n70000\n\x00\x00",
      "P5\n1 1\n10\n\x0b",
  };
  for (const auto& s : bad) {
    CAPTURE(s);
    CHECK(code_of([&] { parse(s); }) == dnet::ErrorCode::parse);
  }
  CHECK(code_of([] { dnet::io::read_pnm(fs::path("/nonexistent/x.pgm")); }) == dnet::ErrorCode::io);
  std::ostringstream out;
  CHECK_THROWS_AS(dnet::io::write_pnm(out, Tensor<float>({1, 2, 2, 2}), 255), dnet::Error);
  CHECK_THROWS_AS(dnet::io::write_pnm(out, Tensor<float>({1, 2, 2, 1}), 1000), dnet::Error);
}

TEST_CASE("image round trips") {
  std::mt19937_64 rng(3);
  SUBCASE("random mask is bit-identical") {
    std::vector<float> m(37 * 23);
    for (auto& v : m) v = static_cast<float>(rng() % 2);
    const Tensor<float> mask({1, 37, 23, 1}, m);
    std::stringstream buf;
    dnet::io::write_pnm(buf, mask, 255);
    const auto back = dnet::io::read_pnm(buf);
    CHECK(back.shape() == mask.shape());
    CHECK(std::equal(m.begin(), m.end(), back.data().begin()));
  }
  SUBCASE("8-bit and 16-bit images are fixed points after one quantisation") {
    for (int maxval : {255, 65535}) {
      std::vector<float> v(9 * 7 * 3);
      for (auto& x : v) x = std::uniform_real_distribution<float>(0, 1)(rng);
      std::stringstream a;
      dnet::io::write_pnm(a, Tensor<float>({1, 9, 7, 3}, v), maxval);
      const std::string first = a.str();
      const auto q = dnet::io::read_pnm(a);
      std::stringstream b;
      dnet::io::write_pnm(b, q, maxval);
      CHECK(b.str() == first);
      const auto q2 = dnet::io::read_pnm(b);
      CHECK(std::equal(q.data().begin(), q.data().end(), q2.data().begin()));
    }
  }
  SUBCASE("probability quantisation error is at most half a level") {
    TempDir dir("prob");
    std::vector<float> p(4096);
    for (auto& x : p) x = std::uniform_real_distribution<float>(0, 1)(rng);
    p[0] = 0;
    p[1] = 1;
    dnet::io::write_probability(dir / "p.pgm", Tensor<float>({1, 64, 64, 1}, p));
    const auto back = dnet::io::read_pnm(dir / "p.pgm");
    double worst = 0;
    for (std::size_t i = 0; i < p.size(); ++i) worst = std::max(worst, std::abs(double{back[i]} - p[i]));
    CHECK(worst <= 1.0 / 131070 + 1e-7);
    CHECK(bytes_of(dir / "p.pgm").rfind("P5\n64 64\n65535\n", 0) == 0);
  }
}

TEST_CASE("run config") {
  const auto cfg = dnet::io::parse_run_config(kTinyConfig);
  CHECK(cfg.model.dilations == std::array<int, 3>{1, 2, 4});
  CHECK(cfg.model.msif_rates == std::array<int, 3>{3, 6, 12});
  CHECK(cfg.model.msif_enabled);
  CHECK(cfg.model.width_divisor == 8);
  CHECK(cfg.train.lr == 3e-4);
  CHECK(cfg.train.max_iter == 6);
  CHECK(cfg.train.batch == 2);
  CHECK(cfg.train.seed == 5);
  CHECK(dnet::io::parse_run_config("channels_scale = 0.125").model.width_divisor == 8);
  CHECK(dnet::io::parse_run_config("channels_scale = 1").model.width_divisor == 1);
  CHECK_FALSE(dnet::io::parse_run_config("msif = off").model.msif_enabled);

  const auto again = dnet::io::parse_run_config(dnet::io::format_run_config(cfg));
  CHECK(again.model == cfg.model);
  CHECK(again.train.lr == cfg.train.lr);
  CHECK(again.train.seed == cfg.train.seed);

  for (const char* bad : {"depth = 3", "d1 = 1\nd1 = 1", "msif = maybe", "d1 = 4\nd2 = 2\nd3 = 1",
                          "msif_rates = 3,6", "lr = fast", "lr = -1", "batch = 0",
                          "channels_scale = 0.3", "channels_scale = 2", "channels_scale = 1/0",
                          "just text", "max_iter ="}) {
    CAPTURE(bad);
    CHECK(code_of([&] { dnet::io::parse_run_config(bad); }) == dnet::ErrorCode::config);
  }
}

TEST_CASE("manifest") {
  const auto m = dnet::io::parse_manifest(
      "# split image mask [fov]\n"
      "train a.ppm a.pgm\n"
      "\n"
      "test sub/b.ppm sub/b.pgm sub/b_fov.pgm\n"
      "train /abs/c.ppm /abs/c.pgm\n",
      "/data/set");
  REQUIRE(m.size() == 3);
  CHECK(m[0].image == fs::path("/data/set/a.ppm"));
  CHECK_FALSE(m[0].fov.has_value());
  CHECK(m[1].split == "test");
  CHECK(*m[1].fov == fs::path("/data/set/sub/b_fov.pgm"));
  CHECK(m[2].mask == fs::path("/abs/c.pgm"));
  for (const char* bad : {"val a b", "train a", "train a b c d"}) {
    CAPTURE(bad);
    CHECK(code_of([&] { dnet::io::parse_manifest(bad, "."); }) == dnet::ErrorCode::parse);
  }
}

TEST_CASE("synth command and dataset loading") {
  TempDir dir("synth");
  dnet::cli::cmd_synth(2, 3, 32, 48, dir.path, 1);
  const auto entries = dnet::io::load_manifest(dir / "manifest.txt");
  REQUIRE(entries.size() == 3);
  CHECK(entries[2].split == "test");
  const auto train = dnet::io::load_dataset(entries, "train");
  CHECK(train.size() == 2);
  CHECK(dnet::io::load_dataset(entries).size() == 3);

  const auto ref = dnet::synth_vessels(2, 3, 32, 48);
  CHECK(train[0].image.shape() == dnet::Shape{1, 32, 48, 3});
  CHECK(std::equal(ref[0].mask.data().begin(), ref[0].mask.data().end(), train[0].mask.data().begin()));
  for (std::size_t i = 0; i < ref[0].image.size(); ++i)
    CHECK(std::abs(train[0].image[i] - ref[0].image[i]) <= 0.5 / 255 + 1e-6);

  // Mismatched extents and missing files.
  dnet::io::write_mask(dir / "small.pgm", Tensor<float>({1, 4, 4, 1}));
  write_file(dir / "m2.txt", "train image_000.ppm small.pgm\n");
  CHECK(code_of([&] { dnet::io::load_dataset(dnet::io::load_manifest(dir / "m2.txt")); }) ==
        dnet::ErrorCode::shape_mismatch);
  write_file(dir / "m3.txt", "train image_000.ppm nope.pgm\n");
  CHECK(code_of([&] { dnet::io::load_dataset(dnet::io::load_manifest(dir / "m3.txt")); }) ==
        dnet::ErrorCode::io);
}

TEST_CASE("checkpoint round trip") {
  dnet::DNetConfig cfg;
  cfg.width_divisor = 8;
  cfg.dilations = {1, 2, 3};
  cfg.msif_enabled = false;
  dnet::DNet<float> net(cfg, 17);
  std::stringstream a;
  dnet::io::save_checkpoint(a, net);
  const std::string first = a.str();
  CHECK(first.rfind("DNET1", 0) == 0);

  auto loaded = dnet::io::load_checkpoint(a);
  CHECK(loaded.config() == cfg);
  std::stringstream b;
  dnet::io::save_checkpoint(b, loaded);
  CHECK(b.str() == first);

  std::mt19937_64 rng(1);
  std::vector<float> img(32 * 32 * 3);
  for (auto& v : img) v = std::uniform_real_distribution<float>(0, 1)(rng);
  const Tensor<float> x({1, 32, 32, 3}, img);
  const auto pa = net.forward(x);
  const auto pb = loaded.forward(x);
  CHECK(std::equal(pa.data().begin(), pa.data().end(), pb.data().begin()));

  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, first.size() / 2, first.size() - 1}) {
    std::istringstream in(first.substr(0, cut));
    CHECK(code_of([&] { dnet::io::load_checkpoint(in); }) == dnet::ErrorCode::parse);
  }
  std::istringstream extra(first + "x");
  CHECK(code_of([&] { dnet::io::load_checkpoint(extra); }) == dnet::ErrorCode::parse);
  std::string wrong = first;
  wrong[4] = '2';
  std::istringstream bad_magic(wrong);
  CHECK(code_of([&] { dnet::io::load_checkpoint(bad_magic); }) == dnet::ErrorCode::parse);
}

TEST_CASE("rf-analyze command") {
  TempDir dir("rf");
  write_file(dir / "stack.txt", "conv 5 1 1\nconv 9 1 1\n");
  std::ostringstream out;
  dnet::cli::cmd_rf_analyze(dir / "stack.txt", std::nullopt, out);
  CHECK(out.str().find("rf=13\n") != std::string::npos);
  CHECK(out.str().find("coverage=dense") != std::string::npos);

  write_file(dir / "sparse.txt", "conv 3 1 2\nconv 3 1 2\nconv 3 1 2\n");
  std::ostringstream sparse;
  dnet::cli::cmd_rf_analyze(dir / "sparse.txt", std::nullopt, sparse);
  CHECK(sparse.str().find("coverage=holes:") != std::string::npos);

  write_file(dir / "run.cfg", kTinyConfig);
  std::ostringstream enc;
  dnet::cli::cmd_rf_analyze(std::nullopt, dir / "run.cfg", enc);
  CHECK(enc.str().find("block5.2.spatial") != std::string::npos);

  std::ostringstream sink;
  CHECK_THROWS_AS(dnet::cli::cmd_rf_analyze(std::nullopt, std::nullopt, sink), dnet::Error);
}

TEST_CASE("eval command on identical directories") {
  TempDir dir("eval");
  dnet::cli::cmd_synth(4, 3, 32, 32, dir / "set");
  fs::create_directories(dir / "gt");
  for (int i = 0; i < 3; ++i) {
    const std::string name = "mask_00" + std::to_string(i) + ".pgm";
    fs::copy_file(dir / "set" / name, dir / "gt" / name);
  }
  std::ostringstream log;
  dnet::cli::cmd_eval(dir / "gt", dir / "gt", std::nullopt, dir / "out", log);
  const std::string metrics = bytes_of(dir / "out" / "metrics.csv");
  CHECK(metrics.rfind("name,value\n", 0) == 0);
  CHECK(metrics.find("\naccuracy,1\n") != std::string::npos);
  CHECK(metrics.find("\nf1,1\n") != std::string::npos);
  CHECK(metrics.find("\nauc_roc,1\n") != std::string::npos);
  CHECK(bytes_of(dir / "out" / "roc.csv").rfind("threshold,fpr,tpr\n", 0) == 0);
  CHECK(bytes_of(dir / "out" / "pr.csv").rfind("threshold,recall,precision\n", 0) == 0);

  fs::create_directories(dir / "partial");
  fs::copy_file(dir / "gt" / "mask_000.pgm", dir / "partial" / "mask_000.pgm");
  CHECK(code_of([&] { dnet::cli::cmd_eval(dir / "gt", dir / "partial", std::nullopt, dir / "o2", log); }) ==
        dnet::ErrorCode::io);
}

TEST_CASE("train then predict is reproducible") {
  TempDir dir("train");
  write_file(dir / "run.cfg", kTinyConfig);
  dnet::cli::TrainArgs args;
  args.config = dir / "run.cfg";
  args.synth = 4;
  args.synth_size = 32;
  args.out = dir / "a.ckpt";
  args.loss_csv = dir / "a.csv";
  std::ostringstream log;
  dnet::cli::cmd_train(args, log);
  CHECK(log.str().find("BCE") != std::string::npos);
  args.out = dir / "b.ckpt";
  args.loss_csv = dir / "b.csv";
  dnet::cli::cmd_train(args, log);
  CHECK(bytes_of(dir / "a.ckpt") == bytes_of(dir / "b.ckpt"));
  CHECK(bytes_of(dir / "a.csv") == bytes_of(dir / "b.csv"));

  const auto model = dnet::io::load_checkpoint(dir / "a.ckpt");
  CHECK(model.config().width_divisor == 8);

  dnet::cli::cmd_synth(9, 1, 32, 32, dir / "img");
  for (const char* tag : {"1", "2"}) {
    dnet::cli::cmd_predict(dir / "a.ckpt", dir / "img" / "image_000.ppm",
                           dir / (std::string("p") + tag + ".pgm"), dir / (std::string("m") + tag + ".pgm"));
  }
  CHECK(bytes_of(dir / "p1.pgm") == bytes_of(dir / "p2.pgm"));
  CHECK(bytes_of(dir / "m1.pgm") == bytes_of(dir / "m2.pgm"));
  const auto mask = dnet::io::read_pnm(dir / "m1.pgm");
  for (float v : mask.data()) CHECK((v == 0.0f || v == 1.0f));

  args.synth.reset();
  CHECK_THROWS_AS(dnet::cli::cmd_train(args, log), dnet::Error);
  args.manifest = dir / "img" / "manifest.txt";
  args.synth = 2;
  CHECK_THROWS_AS(dnet::cli::cmd_train(args, log), dnet::Error);
}
