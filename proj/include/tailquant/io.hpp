#pragma once

#include <string>

#include <json.hpp>

#include "tailquant/bundle.hpp"
#include "tailquant/calibration.hpp"
#include "tailquant/pipeline.hpp"
#include "tailquant/run_config.hpp"

namespace tailquant {

nlohmann::json toynet_config_to_json(const ToyNetConfig& cfg);
ToyNetConfig toynet_config_from_json(const nlohmann::json& j);

nlohmann::json pipeline_options_to_json(const PipelineOptions& opt);
PipelineOptions pipeline_options_from_json(const nlohmann::json& j);

void write_net_bundle(const std::string& manifest_path, const ToyNet& net);
ToyNet read_net_bundle(const std::string& manifest_path);

/// Pool payloads are stored; features are recomputed on load with the
/// default extractor so both sides of the format agree bit-for-bit.
void write_pool_bundle(const std::string& manifest_path, const CalibrationPool& pool);
CalibrationPool read_pool_bundle(const std::string& manifest_path);

/// Full quantization state: original weights, chosen intervals, adapters.
void write_qnet_bundle(const std::string& manifest_path, const QuantizedToyNet& qnet);
QuantizedToyNet read_qnet_bundle(const std::string& manifest_path);

nlohmann::json selection_to_json(const SelectionResult& sel, const StabilityReport* stability,
                                 const std::string& pool_path, std::uint64_t seed);

nlohmann::json report_to_json(const PipelineReport& report, const RunConfig& cfg);

std::string render_accum_csv(const nlohmann::json& report);
std::string render_report_markdown(const nlohmann::json& report);

/// One CSV per recorded search: index,alpha,similarity,chosen rows for every
/// evaluated candidate, ascending by index.
void write_curve_csvs(const std::string& dir, const PipelineReport& report);
std::string curve_csv(const UnitSearch& search);

/// Shortest round-trip decimal formatting (identical to the JSON encoding).
std::string format_double(double v);

}  // namespace tailquant
