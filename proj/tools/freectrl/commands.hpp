#pragma once

#include "run_config.hpp"

namespace freectrl::cli {

/// Each command writes its artifacts and a manifest.json under cfg.out.
void run_atlas(const RunConfig& cfg);
void run_center(const RunConfig& cfg);
void run_generate(const RunConfig& cfg);
void run_eval(const RunConfig& cfg);
void run_profile_report(const RunConfig& cfg);

}  // namespace freectrl::cli
