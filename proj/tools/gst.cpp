#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "gst/pipeline.hpp"

namespace {

// Flag values collected as strings so they can overlay the config file.
struct Overlay {
  gst::KeyValues values;
  std::map<std::string, std::string> storage;

  CLI::Option* add(CLI::App& app, const std::string& flag, const std::string& key, const std::string& help) {
    return app.add_option(flag, storage[key], help);
  }
  gst::KeyValues merge(CLI::App& app, const std::string& config_path) const {
    gst::KeyValues kv = config_path.empty() ? gst::KeyValues{} : gst::read_config_file(config_path);
    for (const auto& [key, value] : storage) {
      const std::string flag = "--" + [&] {
        std::string f = key;
        for (char& c : f)
          if (c == '_') c = '-';
        return f;
      }();
      if (app.get_option(flag)->count() > 0) kv[key] = value;
    }
    return kv;
  }
};

int fail(const std::string& category, const std::string& message) {
  std::cerr << "error[" << category << "]: " << message << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometric and texture style transfer"};
  app.require_subcommand(1);

  auto* transfer = app.add_subcommand("transfer", "Stylize a content image with a texture style and a geometry style");
  Overlay t;
  std::string transfer_config;
  t.add(*transfer, "--content", "content", "Content image");
  t.add(*transfer, "--style", "style", "Texture style image; its size is the output size");
  t.add(*transfer, "--geometry-style", "geometry_style", "Geometry style image (default: the texture style)");
  t.add(*transfer, "--out", "out", "Output PNG");
  t.add(*transfer, "--warp", "warp", "tps | affine | none (default tps)");
  t.add(*transfer, "--levels", "levels", "Pyramid levels (default 3)");
  t.add(*transfer, "--iters", "iters", "Iterations per level, finest first (default 100,200,300)");
  t.add(*transfer, "--alpha-over-beta", "alpha_over_beta", "Texture to content weight ratio (default 5e-3)");
  t.add(*transfer, "--optimizer", "optimizer", "adam | lbfgs (default adam)");
  t.add(*transfer, "--affine-ckpt", "affine_ckpt", "Affine regressor checkpoint");
  t.add(*transfer, "--tps-ckpt", "tps_ckpt", "TPS regressor checkpoint");
  t.add(*transfer, "--seed", "seed", "Seed");
  t.add(*transfer, "--emit-intermediates", "emit_intermediates", "Directory for the warped content and per-level images");
  t.add(*transfer, "--loss-log", "loss_log", "CSV of level,iter,total,texture,content");
  t.add(*transfer, "--backbone-weights", "backbone_weights", "VGG-19 weights file (default: seeded backbone)");
  t.add(*transfer, "--backbone-seed", "backbone_seed", "Seed of the seeded backbone (default 0)");
  transfer->add_option("--config", transfer_config, "key = value config file; flags override it");

  auto* train = app.add_subcommand("train", "Train a warp regressor on synthetic warps of a corpus");
  Overlay r;
  std::string train_config;
  r.add(*train, "--kind", "kind", "affine | tps");
  r.add(*train, "--corpus", "corpus", "Directory of training images");
  r.add(*train, "--synthetic", "synthetic", "Train on N procedural images instead of a corpus");
  r.add(*train, "--out-ckpt", "out_ckpt", "Checkpoint to write");
  r.add(*train, "--affine-ckpt", "affine_ckpt", "Trained affine checkpoint (required for tps)");
  r.add(*train, "--epochs", "epochs", "Epochs (default 10)");
  r.add(*train, "--seed", "seed", "Seed");
  r.add(*train, "--batch-size", "batch_size", "Batch size (default 8)");
  r.add(*train, "--learning-rate", "learning_rate", "Adam learning rate (default 1e-3)");
  r.add(*train, "--pairs-per-image", "pairs_per_image", "Fresh warps per image and epoch (default 1)");
  r.add(*train, "--augment", "augment", "none | jitter | style_bank (default jitter)");
  r.add(*train, "--style-bank", "style_bank", "Directory of <name>__<k> renditions");
  r.add(*train, "--log", "log", "CSV of epoch,batch,loss");
  r.add(*train, "--backbone-weights", "backbone_weights", "VGG-19 weights file (default: seeded backbone)");
  r.add(*train, "--backbone-seed", "backbone_seed", "Seed of the seeded backbone (default 0)");
  train->add_option("--config", train_config, "key = value config file; flags override it");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (*transfer) {
      gst::JobSpec job;
      gst::apply_config(t.merge(*transfer, transfer_config), job);
      int last_level = -1;
      const auto report = gst::run_transfer_report(job, [&](const gst::IterationRecord& rec) {
        if (rec.level != last_level) {
          std::cerr << "level " << rec.level << ": start loss " << rec.loss.total << '\n';
          last_level = rec.level;
        }
      });
      for (std::size_t i = 0; i < report.result.levels.size(); ++i) {
        const auto& lv = report.result.levels[i];
        std::cerr << "level " << report.result.levels.size() - 1 - i << ": " << lv.initial.total << " -> " << lv.final.total
                  << '\n';
      }
      std::cout << report.output.string() << '\n';
    } else if (*train) {
      gst::TrainJob job;
      gst::apply_config(r.merge(*train, train_config), job);
      const auto path = gst::run_train(job, [](int epoch, int batch, double loss) {
        if (batch % 25 == 0) std::cerr << "epoch " << epoch << " batch " << batch << " loss " << loss << '\n';
      });
      std::cout << path.string() << '\n';
    }
  } catch (const gst::Error& e) {
    return fail(e.category(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
