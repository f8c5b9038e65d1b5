// Generates the bundled demo model and synthetic dataset files.

#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "wattsel/demo_model.hpp"
#include "wattsel/qnn.hpp"

int main(int argc, char** argv) {
  CLI::App app{"wattsel fixture generator: demo model + synthetic datasets"};
  std::string out_dir = ".";
  int calib_n = 512, val_n = 1024;
  std::uint64_t seed = 7;
  app.add_option("--out-dir", out_dir, "output directory");
  app.add_option("--calib-n", calib_n, "calibration split size");
  app.add_option("--val-n", val_n, "validation split size");
  app.add_option("--seed", seed, "dataset seed");
  CLI11_PARSE(app, argc, argv);

  try {
    std::filesystem::create_directories(out_dir);
    wattsel::QuantizedNetwork net = wattsel::demo::build_demo_network();
    std::string model_path = out_dir + "/demo_cnn.json";
    wattsel::save_model(net, model_path);

    wattsel::Dataset calib = wattsel::demo::make_dataset(calib_n, seed, "calibration");
    wattsel::Dataset val = wattsel::demo::make_dataset(val_n, seed + 1, "validation");
    wattsel::save_dataset(calib, out_dir + "/calib.wsds");
    wattsel::save_dataset(val, out_dir + "/val.wsds");

    wattsel::AccuracyResult acc = wattsel::accuracy(net, val, -1, 0);
    std::printf("model: %s (fingerprint %s)\n", model_path.c_str(),
                wattsel::network_fingerprint(net).c_str());
    std::printf("calib: %d samples, val: %d samples\n", calib.n, val.n);
    std::printf("baseline top-1 on val: %.4f (overflows: %llu)\n", acc.top1,
                static_cast<unsigned long long>(acc.overflows));
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
