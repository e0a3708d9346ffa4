// Command-line front end: analysis, shape trace, inference, gradient checks,
// the scaling benchmark, the toy training harness, and weight initialization.

#include <array>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dpnet/analyzer.hpp"
#include "dpnet/gradcheck.hpp"
#include "dpnet/network.hpp"
#include "dpnet/training.hpp"
#include "dpnet/weights.hpp"

namespace {

using dpnet::NetConfig;
using nlohmann::json;

void write_output(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << text;
}

json trace_to_json(const std::vector<dpnet::TraceRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    json row{{"layer", r.layer}, {"lrp", {{"op", r.lrp_op}, {"shape", r.lrp_shape}}}};
    if (r.has_hrp) row["hrp"] = {{"op", r.hrp_op}, {"shape", r.hrp_shape}};
    arr.push_back(row);
  }
  return arr;
}

// Reduced graph used by `gradcheck` and sized for finite differences: one
// ASU per stage path, narrow neck, 64 px input.
NetConfig reduced_config(const NetConfig& base) {
  NetConfig cfg = base;
  cfg.input_size = 128;
  cfg.num_classes = 3;
  cfg.k = 3;
  cfg.stage2_asus = 1;
  cfg.stage3_asus = 1;
  cfg.stage4_asus = 1;
  cfg.stage3_hrp_asus = 1;
  cfg.stage4_hrp_asus = 1;
  cfg.neck_width = 64;
  cfg.head_width = 64;
  return cfg;
}

int run_gradcheck(const NetConfig& base, int probes) {
  dpnet::DpNet<double> net(reduced_config(base));
  const NetConfig& cfg = net.config();
  dpnet::randomize_gate_projections(net, cfg.seed + 2);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<double> pixels(static_cast<std::size_t>(3) * cfg.input_size * cfg.input_size);
  for (auto& v : pixels) v = dist(rng);
  dpnet::Tensor<double> image =
      dpnet::Tensor<double>::from({3, cfg.input_size, cfg.input_size}, std::move(pixels));
  std::vector<dpnet::GtBox> gts = {{0, 40.0, 36.0, 30.0, 26.0}, {2, 90.0, 80.0, 52.0, 60.0}};

  auto build_loss = [&]() {
    auto heads = net.forward(image, false);
    return dpnet::total_loss(dpnet::loss_terms(heads, gts, cfg.num_classes), dpnet::LossConfig{});
  };
  std::vector<std::pair<std::string, dpnet::Tensor<double>>> params;
  for (auto& p : net.params()) params.push_back({p.name, p.tensor});

  auto report = dpnet::finite_diff_check(build_loss, params, 1e-4, 1e-8, probes, cfg.seed + 1, true);
  for (const auto& e : report.entries)
    std::cout << e.name << " probes=" << e.probes << " max_rel_err=" << e.max_rel_err << "\n";
  std::cout << "worst=" << report.worst() << " tolerance=" << report.tolerance
            << (report.ok() ? " PASS" : " FAIL") << "\n";
  if (!report.ok()) throw dpnet::NumericError("gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-path realtime detector toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value config file");
  app.allow_config_extras(false);

  NetConfig cfg;
  app.add_option("--num-classes", cfg.num_classes, "object classes");
  app.add_option("--input-size", cfg.input_size, "square input size, multiple of 32");
  app.add_option("--k", cfg.k, "attention pooling size");
  app.add_option("--r", cfg.r, "attention channel reduction");
  app.add_option("--neck-width", cfg.neck_width, "neck channels");
  app.add_option("--head-width", cfg.head_width, "head channels");
  app.add_option("--seed", cfg.seed, "init seed");
  app.add_option("--s2-asus", cfg.stage2_asus, "stage2 ASUs after the stride unit");
  app.add_option("--s3-asus", cfg.stage3_asus, "stage3 LRP ASUs after the stride unit");
  app.add_option("--s4-asus", cfg.stage4_asus, "stage4 LRP ASUs after the stride unit");
  app.add_option("--s3-hrp-asus", cfg.stage3_hrp_asus, "stage3 HRP ASUs");
  app.add_option("--s4-hrp-asus", cfg.stage4_hrp_asus, "stage4 HRP ASUs");

  std::string weights_path, input_path, out_path;
  bool markdown = false;
  double threshold = 0.25, nms_iou = 0.45;
  int steps = 200, probes = 24;

  auto* analyze = app.add_subcommand("analyze", "parameter/MAC report");
  analyze->add_option("--out", out_path, "output path (default stdout)");
  analyze->add_flag("--markdown", markdown, "emit markdown instead of JSON");
  analyze->callback([&] {
    dpnet::DpNet<float> net(cfg);
    auto rep = dpnet::count_params_macs(net);
    const int n = (cfg.input_size / 8) * (cfg.input_size / 8);
    rep.complexity = dpnet::complexity_table2(n, cfg.stage2_channels, cfg.k, cfg.r);
    write_output(out_path, markdown ? dpnet::report_to_markdown(rep)
                                    : dpnet::report_to_json(rep).dump(2) + "\n");
  });

  auto* trace = app.add_subcommand("trace", "backbone shape trace");
  trace->add_option("--out", out_path, "output path (default stdout)");
  trace->callback([&] {
    dpnet::DpNet<float> net(cfg);
    write_output(out_path, trace_to_json(net.trace()).dump(2) + "\n");
  });

  auto* forward = app.add_subcommand("forward", "run one image, emit detections");
  forward->add_option("--weights", weights_path, "weight file")->required();
  forward->add_option("--input", input_path, "tensor file with an entry named \"input\"")->required();
  forward->add_option("--threshold", threshold, "score threshold");
  forward->add_option("--nms-iou", nms_iou, "NMS IoU threshold");
  forward->add_option("--out", out_path, "output path (default stdout)");
  forward->callback([&] {
    dpnet::DpNet<float> net(cfg);
    net.assign_weights(dpnet::load_weights<float>(weights_path));
    auto input_store = dpnet::load_weights<float>(input_path);
    auto heads = net.forward(input_store.at("input"), false);
    auto dets = dpnet::nms(dpnet::decode(heads, cfg.num_classes, threshold), nms_iou);
    json arr = json::array();
    for (const auto& d : dets)
      arr.push_back({{"class", d.cls},
                     {"score", d.score},
                     {"box", {d.x_min, d.y_min, d.x_max, d.y_max}}});
    write_output(out_path, arr.dump(2) + "\n");
  });

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--probes", probes, "sampled probes per parameter (0 = all)");
  gradcheck->callback([&] { run_gradcheck(cfg, probes); });

  auto* bench = app.add_subcommand("bench", "attention scaling benchmark");
  bench->add_option("--out", out_path, "output path (default stdout)");
  bench->callback([&] {
    auto rep = dpnet::scaling_bench(64, 5, 8, {10, 20, 40, 80}, cfg.seed);
    std::string csv = "n,lscm_macs,dense_macs,lscm_ms,dense_ms\n";
    for (const auto& row : rep.bench)
      csv += std::to_string(row.n) + "," + std::to_string(row.lscm_macs) + "," +
             std::to_string(row.dense_macs) + "," + std::to_string(row.lscm_ms) + "," +
             std::to_string(row.dense_ms) + "\n";
    csv += "# lscm_slope=" + std::to_string(rep.lscm_slope) +
           " dense_slope=" + std::to_string(rep.dense_slope) + "\n";
    write_output(out_path, csv);
  });

  auto* train = app.add_subcommand("train-toy", "overfit 4 synthetic scenes");
  train->add_option("--steps", steps, "optimizer steps");
  train->add_option("--out", out_path, "CSV output path (default stdout)");
  train->callback([&] {
    dpnet::DpNet<float> net(cfg);
    auto trace_rows = dpnet::toy_overfit(net, steps, dpnet::OptimConfig{}, dpnet::LossConfig{}, cfg.seed);
    write_output(out_path, dpnet::trace_to_csv(trace_rows));
  });

  auto* init = app.add_subcommand("init", "write randomly initialized weights");
  init->add_option("--weights", weights_path, "output weight file")->required();
  init->callback([&] {
    dpnet::DpNet<float> net(cfg);
    dpnet::save_weights(net.store(), weights_path);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const dpnet::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const dpnet::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
