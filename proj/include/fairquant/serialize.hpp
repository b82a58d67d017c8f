#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "fairquant/audit.hpp"
#include "fairquant/diagnostics.hpp"
#include "fairquant/network.hpp"
#include "fairquant/quantize.hpp"
#include "fairquant/train.hpp"

namespace fairquant {

// ---- low-level encoding -------------------------------------------------

std::string base64_encode(const std::uint8_t* data, std::size_t size);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Little-endian f64 array <-> base64, byte order fixed regardless of host.
std::string encode_doubles(const double* values, std::size_t count);
std::vector<double> decode_doubles(const std::string& text);

/// Shortest exact decimal for a double (17 significant digits).
std::string format_double(double value);

// ---- network checkpoints -------------------------------------------------

/// Self-describing JSON checkpoint; save -> load round-trips bit-exactly.
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);
std::string checkpoint_to_json(const Network& net);
Network checkpoint_from_json(const std::string& text);

// ---- quantized models ----------------------------------------------------

void save_quantized(const QuantizedModel& qm, const std::string& path);
QuantizedModel load_quantized(const std::string& path);
std::string quantized_to_json(const QuantizedModel& qm);
QuantizedModel quantized_from_json(const std::string& text);

// ---- reports -------------------------------------------------------------

/// Canonical (alphabetically keyed) JSON for the audit report.
std::string audit_report_to_json(const AuditReport& report);
/// Long-format CSV: group,metric,value with overall rows under "overall".
std::string audit_report_to_csv(const AuditReport& report);
/// Plot-ready histogram CSV: group,bin_left,bin_right,count.
std::string dtdb_histogram_csv(const AuditReport& report);

std::string diagnostics_report_to_json(const DiagnosticsReport& report);
/// Long-format CSV rows (precision,group,metric,value), no header, so sweep
/// cells can be concatenated under one header.
void diagnostics_report_csv_rows(const DiagnosticsReport& report, std::ostream& out);

/// Trace CSV: epoch,overall_loss,loss_<group>...,acc_<group>...[,qat_grid_gap].
std::string trace_to_csv(const TrainTrace& trace, const std::vector<std::string>& group_names);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace fairquant
