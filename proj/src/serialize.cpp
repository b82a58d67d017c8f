#include "fairquant/serialize.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fairquant {

using nlohmann::json;

namespace {

constexpr char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

constexpr int kCheckpointVersion = 1;
constexpr int kQuantizedVersion = 1;

void append_le(std::vector<std::uint8_t>& bytes, std::uint64_t value, int width) {
  for (int b = 0; b < width; ++b) bytes.push_back(static_cast<std::uint8_t>(value >> (8 * b)));
}

std::uint64_t read_le(const std::vector<std::uint8_t>& bytes, std::size_t offset, int width) {
  std::uint64_t value = 0;
  for (int b = 0; b < width; ++b) {
    value |= static_cast<std::uint64_t>(bytes[offset + static_cast<std::size_t>(b)]) << (8 * b);
  }
  return value;
}

std::string encode_codes(const QuantizedTensor& qt) {
  std::vector<std::uint8_t> bytes;
  switch (qt.spec.kind) {
    case PrecisionKind::Integer:
      bytes.reserve(qt.codes.size() * 4);
      for (const std::int64_t code : qt.codes) {
        append_le(bytes, static_cast<std::uint64_t>(static_cast<std::uint32_t>(
                             static_cast<std::int32_t>(code))),
                  4);
      }
      break;
    case PrecisionKind::Float16Grid:
      bytes.reserve(qt.codes.size() * 2);
      for (const std::int64_t code : qt.codes) {
        append_le(bytes, static_cast<std::uint64_t>(code) & 0xffff, 2);
      }
      break;
    case PrecisionKind::Float32Passthrough:
      bytes.reserve(qt.codes.size() * 8);
      for (const std::int64_t code : qt.codes) {
        append_le(bytes, static_cast<std::uint64_t>(code), 8);
      }
      break;
  }
  return base64_encode(bytes.data(), bytes.size());
}

std::vector<std::int64_t> decode_codes(const std::string& text, const PrecisionSpec& spec,
                                       std::size_t expected_count) {
  const std::vector<std::uint8_t> bytes = base64_decode(text);
  const int width = spec.kind == PrecisionKind::Integer
                        ? 4
                        : (spec.kind == PrecisionKind::Float16Grid ? 2 : 8);
  if (bytes.size() != expected_count * static_cast<std::size_t>(width)) {
    throw ParseError("quantized model: code array has the wrong byte length");
  }
  std::vector<std::int64_t> codes(expected_count);
  for (std::size_t k = 0; k < expected_count; ++k) {
    const std::uint64_t raw = read_le(bytes, k * static_cast<std::size_t>(width), width);
    if (spec.kind == PrecisionKind::Integer) {
      codes[k] = static_cast<std::int32_t>(static_cast<std::uint32_t>(raw));
    } else {
      codes[k] = static_cast<std::int64_t>(raw);
    }
  }
  return codes;
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& err) {
    throw ParseError(what + ": invalid JSON: " + err.what());
  }
}

void expect_format(const json& doc, const std::string& format, int version,
                   const std::string& what) {
  if (!doc.is_object() || doc.value("format", "") != format) {
    throw ParseError(what + ": unexpected format field");
  }
  if (doc.value("format_version", -1) != version) {
    throw ParseError(what + ": unsupported format_version");
  }
}

json group_audit_to_json(const GroupAudit& g, const std::string& name) {
  json out;
  out["name"] = name;
  out["present"] = g.present;
  out["sample_count"] = g.sample_count;
  if (!g.present) return out;
  out["accuracy"] = g.accuracy;
  out["loss"] = g.loss;
  if (g.cd_defined) {
    out["avg_cosine_distance"] = g.avg_cosine_distance;
  } else {
    out["avg_cosine_distance"] = nullptr;
  }
  out["cd_excluded"] = g.cd_excluded;
  out["avg_l1"] = g.avg_l1;
  out["avg_l2"] = g.avg_l2;
  out["mean_logit_variance"] = g.mean_logit_variance;
  out["mean_softmax_variance"] = g.mean_softmax_variance;
  out["avg_prediction_probability"] = g.avg_prediction_probability;
  out["dtdb_counts"] = g.dtdb_counts;
  return out;
}

}  // namespace

std::string base64_encode(const std::uint8_t* data, std::size_t size) {
  std::string out;
  out.reserve((size + 2) / 3 * 4);
  for (std::size_t i = 0; i < size; i += 3) {
    const std::uint32_t b0 = data[i];
    const std::uint32_t b1 = i + 1 < size ? data[i + 1] : 0;
    const std::uint32_t b2 = i + 2 < size ? data[i + 2] : 0;
    const std::uint32_t triple = (b0 << 16) | (b1 << 8) | b2;
    out.push_back(kB64Alphabet[(triple >> 18) & 0x3f]);
    out.push_back(kB64Alphabet[(triple >> 12) & 0x3f]);
    out.push_back(i + 1 < size ? kB64Alphabet[(triple >> 6) & 0x3f] : '=');
    out.push_back(i + 2 < size ? kB64Alphabet[triple & 0x3f] : '=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw ParseError("base64: length must be a multiple of 4");
  static const auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + static_cast<std::size_t>(k)];
      if (c == '=') {
        if (i + 4 != text.size() || k < 2) throw ParseError("base64: misplaced padding");
        vals[k] = 0;
        ++pad;
      } else {
        vals[k] = value_of(c);
        if (vals[k] < 0) throw ParseError("base64: invalid character");
        if (pad > 0) throw ParseError("base64: data after padding");
      }
    }
    const std::uint32_t triple = (static_cast<std::uint32_t>(vals[0]) << 18) |
                                 (static_cast<std::uint32_t>(vals[1]) << 12) |
                                 (static_cast<std::uint32_t>(vals[2]) << 6) |
                                 static_cast<std::uint32_t>(vals[3]);
    out.push_back(static_cast<std::uint8_t>((triple >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((triple >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(triple & 0xff));
  }
  return out;
}

std::string encode_doubles(const double* values, std::size_t count) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(count * 8);
  for (std::size_t i = 0; i < count; ++i) {
    append_le(bytes, std::bit_cast<std::uint64_t>(values[i]), 8);
  }
  return base64_encode(bytes.data(), bytes.size());
}

std::vector<double> decode_doubles(const std::string& text) {
  const std::vector<std::uint8_t> bytes = base64_decode(text);
  if (bytes.size() % 8 != 0) throw ParseError("f64 array: byte length must be a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<double>(read_le(bytes, i * 8, 8));
  }
  return out;
}

std::string format_double(double value) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

std::string checkpoint_to_json(const Network& net) {
  json doc;
  doc["format"] = "fairquant.checkpoint";
  doc["format_version"] = kCheckpointVersion;
  json layers = json::array();
  for (const DenseLayer& layer : net.layers()) {
    json entry;
    entry["inputs"] = layer.inputs();
    entry["outputs"] = layer.outputs();
    entry["activation"] = activation_name(layer.activation);
    entry["weights"] = encode_doubles(layer.weights.data(),
                                      static_cast<std::size_t>(layer.weights.size()));
    entry["bias"] = encode_doubles(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
    layers.push_back(std::move(entry));
  }
  doc["layers"] = std::move(layers);
  return doc.dump(2) + "\n";
}

Network checkpoint_from_json(const std::string& text) {
  const json doc = parse_json(text, "checkpoint");
  expect_format(doc, "fairquant.checkpoint", kCheckpointVersion, "checkpoint");
  if (!doc.contains("layers") || !doc["layers"].is_array() || doc["layers"].empty()) {
    throw ParseError("checkpoint: missing layers");
  }
  std::vector<DenseLayer> layers;
  for (const json& entry : doc["layers"]) {
    DenseLayer layer;
    const auto outputs = entry.at("outputs").get<Eigen::Index>();
    const auto inputs = entry.at("inputs").get<Eigen::Index>();
    layer.activation = activation_from_name(entry.at("activation").get<std::string>());
    const std::vector<double> w = decode_doubles(entry.at("weights").get<std::string>());
    const std::vector<double> b = decode_doubles(entry.at("bias").get<std::string>());
    if (static_cast<Eigen::Index>(w.size()) != outputs * inputs ||
        static_cast<Eigen::Index>(b.size()) != outputs) {
      throw ParseError("checkpoint: array lengths do not match the declared shape");
    }
    layer.weights.resize(outputs, inputs);
    std::copy(w.begin(), w.end(), layer.weights.data());
    layer.bias.resize(outputs);
    std::copy(b.begin(), b.end(), layer.bias.data());
    layers.push_back(std::move(layer));
  }
  return Network(std::move(layers));
}

void save_checkpoint(const Network& net, const std::string& path) {
  write_text_file(path, checkpoint_to_json(net));
}

Network load_checkpoint(const std::string& path) {
  return checkpoint_from_json(read_text_file(path));
}

std::string quantized_to_json(const QuantizedModel& qm) {
  json doc;
  doc["format"] = "fairquant.quantized_model";
  doc["format_version"] = kQuantizedVersion;
  doc["default_precision"] = qm.spec.default_spec.name();
  json layers = json::array();
  for (int l = 0; l < qm.num_layers(); ++l) {
    const auto li = static_cast<std::size_t>(l);
    const QuantizedTensor& qt = qm.weights[li];
    json entry;
    entry["inputs"] = qt.cols;
    entry["outputs"] = qt.rows;
    entry["activation"] = activation_name(qm.activations[li]);
    entry["precision"] = qt.spec.name();
    entry["scale"] = qt.scale;
    entry["codes"] = encode_codes(qt);
    entry["bias"] = encode_doubles(qm.biases[li].data(),
                                   static_cast<std::size_t>(qm.biases[li].size()));
    layers.push_back(std::move(entry));
  }
  doc["layers"] = std::move(layers);
  return doc.dump(2) + "\n";
}

QuantizedModel quantized_from_json(const std::string& text) {
  const json doc = parse_json(text, "quantized model");
  expect_format(doc, "fairquant.quantized_model", kQuantizedVersion, "quantized model");
  if (!doc.contains("layers") || !doc["layers"].is_array() || doc["layers"].empty()) {
    throw ParseError("quantized model: missing layers");
  }
  QuantizedModel qm;
  qm.spec.default_spec = PrecisionSpec::parse(doc.at("default_precision").get<std::string>());
  int layer = 0;
  for (const json& entry : doc["layers"]) {
    QuantizedTensor qt;
    qt.cols = entry.at("inputs").get<Eigen::Index>();
    qt.rows = entry.at("outputs").get<Eigen::Index>();
    qt.spec = PrecisionSpec::parse(entry.at("precision").get<std::string>());
    qt.scale = entry.at("scale").get<double>();
    qt.codes = decode_codes(entry.at("codes").get<std::string>(), qt.spec,
                            static_cast<std::size_t>(qt.rows * qt.cols));
    const std::vector<double> b = decode_doubles(entry.at("bias").get<std::string>());
    if (static_cast<Eigen::Index>(b.size()) != qt.rows) {
      throw ParseError("quantized model: bias length mismatch");
    }
    Vector bias(qt.rows);
    std::copy(b.begin(), b.end(), bias.data());
    if (!(qt.spec == qm.spec.default_spec)) qm.spec.overrides[layer] = qt.spec;
    qm.weights.push_back(std::move(qt));
    qm.biases.push_back(std::move(bias));
    qm.activations.push_back(activation_from_name(entry.at("activation").get<std::string>()));
    ++layer;
  }
  return qm;
}

void save_quantized(const QuantizedModel& qm, const std::string& path) {
  write_text_file(path, quantized_to_json(qm));
}

QuantizedModel load_quantized(const std::string& path) {
  return quantized_from_json(read_text_file(path));
}

std::string audit_report_to_json(const AuditReport& report) {
  json doc;
  doc["format"] = "fairquant.audit_report";
  doc["format_version"] = 1;
  doc["precision"] = report.precision;
  doc["seed"] = report.seed;
  doc["dataset_id"] = report.dataset_id;
  doc["overall_accuracy"] = report.overall_accuracy;
  if (report.fvo.has_value()) {
    doc["fvo"] = *report.fvo;
  } else {
    doc["fvo"] = nullptr;
  }
  json groups = json::array();
  for (std::size_t g = 0; g < report.groups.size(); ++g) {
    groups.push_back(group_audit_to_json(report.groups[g], report.group_names[g]));
  }
  doc["groups"] = std::move(groups);
  return doc.dump(2) + "\n";
}

std::string audit_report_to_csv(const AuditReport& report) {
  std::ostringstream out;
  out << "group,metric,value\n";
  out << "overall,overall_accuracy," << format_double(report.overall_accuracy) << "\n";
  if (report.fvo.has_value()) out << "overall,fvo," << format_double(*report.fvo) << "\n";
  for (std::size_t g = 0; g < report.groups.size(); ++g) {
    const GroupAudit& slot = report.groups[g];
    if (!slot.present) continue;
    const std::string& name = report.group_names[g];
    const auto row = [&](const char* metric, double value) {
      out << name << ',' << metric << ',' << format_double(value) << "\n";
    };
    row("accuracy", slot.accuracy);
    row("loss", slot.loss);
    if (slot.cd_defined) row("avg_cosine_distance", slot.avg_cosine_distance);
    row("cd_excluded", static_cast<double>(slot.cd_excluded));
    row("avg_l1", slot.avg_l1);
    row("avg_l2", slot.avg_l2);
    row("mean_logit_variance", slot.mean_logit_variance);
    row("mean_softmax_variance", slot.mean_softmax_variance);
    row("avg_prediction_probability", slot.avg_prediction_probability);
  }
  return out.str();
}

std::string dtdb_histogram_csv(const AuditReport& report) {
  std::ostringstream out;
  out << "group,bin_left,bin_right,count\n";
  for (std::size_t g = 0; g < report.groups.size(); ++g) {
    const GroupAudit& slot = report.groups[g];
    if (!slot.present) continue;
    for (std::size_t b = 0; b < slot.dtdb_counts.size(); ++b) {
      out << report.group_names[g] << ',' << format_double(static_cast<double>(b) / kDtdbBins)
          << ',' << format_double(static_cast<double>(b + 1) / kDtdbBins) << ','
          << slot.dtdb_counts[b] << "\n";
    }
  }
  return out.str();
}

std::string diagnostics_report_to_json(const DiagnosticsReport& report) {
  json doc;
  doc["format"] = "fairquant.diagnostics_report";
  doc["format_version"] = 1;
  doc["precision"] = report.precision;
  doc["seed"] = report.seed;
  doc["failed"] = report.failed;
  if (report.failed) doc["error"] = report.error;
  json groups = json::array();
  for (std::size_t g = 0; g < report.groups.size(); ++g) {
    const GroupDiagnostics& slot = report.groups[g];
    json entry;
    entry["name"] = report.group_names[g];
    entry["present"] = slot.present;
    entry["sample_count"] = slot.sample_count;
    if (slot.present) {
      entry["gradient_norm"] = slot.gradient_norm;
      entry["lambda_max"] = slot.lambda_max;
      entry["residual"] = slot.residual;
      entry["iterations"] = slot.iterations;
      entry["degenerate"] = slot.degenerate;
      entry["group_size_fraction"] = report.group_size_fraction[g];
    }
    groups.push_back(std::move(entry));
  }
  doc["groups"] = std::move(groups);
  return doc.dump(2) + "\n";
}

void diagnostics_report_csv_rows(const DiagnosticsReport& report, std::ostream& out) {
  if (report.failed) return;
  for (std::size_t g = 0; g < report.groups.size(); ++g) {
    const GroupDiagnostics& slot = report.groups[g];
    if (!slot.present) continue;
    const std::string& name = report.group_names[g];
    out << report.precision << ',' << name << ",gradient_norm,"
        << format_double(slot.gradient_norm) << "\n";
    out << report.precision << ',' << name << ",lambda_max," << format_double(slot.lambda_max)
        << "\n";
    if (slot.lambda_max > 0.0) {
      out << report.precision << ',' << name << ",log_lambda_max,"
          << format_double(std::log(slot.lambda_max)) << "\n";
    }
    out << report.precision << ',' << name << ",group_size_fraction,"
        << format_double(report.group_size_fraction[g]) << "\n";
  }
}

std::string trace_to_csv(const TrainTrace& trace, const std::vector<std::string>& group_names) {
  std::ostringstream out;
  out << "epoch,overall_loss";
  for (const std::string& name : group_names) out << ",loss_" << name;
  for (const std::string& name : group_names) out << ",acc_" << name;
  const bool qat = !trace.qat_grid_gap.empty();
  if (qat) out << ",qat_grid_gap";
  out << "\n";
  for (std::size_t e = 0; e < trace.epochs(); ++e) {
    out << e << ',' << format_double(trace.overall_loss[e]);
    for (double v : trace.group_loss[e]) out << ',' << format_double(v);
    for (double v : trace.group_accuracy[e]) out << ',' << format_double(v);
    if (qat) out << ',' << format_double(trace.qat_grid_gap[e]);
    out << "\n";
  }
  return out.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  out << text;
  if (!out) throw ParseError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace fairquant
