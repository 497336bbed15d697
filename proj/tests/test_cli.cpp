// End-to-end exercise of the delag binary: every subcommand, the documented
// exit codes, and artifact determinism across worker counts.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void check(bool ok, const std::string& what) {
    if (ok) {
        std::printf("ok   %s\n", what.c_str());
    } else {
        std::printf("FAIL %s\n", what.c_str());
        ++g_failures;
    }
}

std::string delag_bin() {
    const char* env = std::getenv("DELAG_BIN");
    return env ? env : "./delag";
}

int run(const std::string& args, std::string* capture = nullptr) {
    const std::string cmd =
        delag_bin() + " " + args +
        (capture ? " > /tmp/delag_cli_out.txt 2>/dev/null" : " >/dev/null 2>/dev/null");
    const int rc = std::system(cmd.c_str());
    if (capture) {
        std::ifstream in("/tmp/delag_cli_out.txt");
        std::stringstream ss;
        ss << in.rdbuf();
        *capture = ss.str();
    }
    return WEXITSTATUS(rc);
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

int main() {
    const fs::path dir = fs::temp_directory_path() / "delag_cli_e2e";
    fs::remove_all(dir);
    fs::create_directories(dir);

    // config with a small grid so the full pipeline stays fast
    {
        nlohmann::json cfg;
        cfg["seed"] = 7;
        cfg["synth"] = {{"shape", {0, 10, 10}}, {"seed", 7}, {"cloud_fraction_target", 0.4}};
        cfg["fit_atc"] = {{"epochs", 400}, {"snapshot_window", 200}, {"snapshot_stride", 4}};
        cfg["gp"] = {{"min_train", 15}};
        std::ofstream((dir / "cfg.json")) << cfg.dump(2);
    }
    const std::string cfg = " --config " + (dir / "cfg.json").string();

    check(run("crosstrack --lat 40.7") == 0, "crosstrack exits 0");
    {
        std::string out;
        run("crosstrack --lat 0", &out);
        const auto pos = out.find("ratio=");
        check(pos != std::string::npos, "crosstrack prints ratio");
        const double ratio = std::stod(out.substr(pos + 6, 6));
        check(std::fabs(ratio - 1.07) <= 0.01, "equator ratio near 1.07");
    }
    {
        std::string out;
        run("crosstrack --table 0:80:5", &out);
        check(out.rfind("latitude_deg,ratio,overlap_fraction", 0) == 0,
              "crosstrack table CSV header");
        int lines = 0;
        for (char c : out)
            if (c == '\n') ++lines;
        check(lines == 18, "crosstrack table has 17 rows");
    }

    check(run("definitely-not-a-subcommand") == 2, "unknown subcommand exits 2");
    check(run("crosstrack --does-not-exist 1") == 2, "unknown flag exits 2");
    check(run("fit-atc --stack /nonexistent --era5 /nonexistent --out /tmp/x --seed 1") == 1,
          "missing input exits 1");

    // ---- full pipeline ----
    const std::string data = (dir / "data").string();
    check(run("generate" + cfg + " --out-dir " + data) == 0, "generate exits 0");
    for (const char* f : {"stack.lstc", "era5.lstc", "features.lstc", "truth_lst.lstc",
                          "truth_residuals.lstc", "truth_params.json"})
        check(fs::exists(fs::path(data) / f), std::string("generate wrote ") + f);

    const std::string stack = data + "/stack.lstc";
    const std::string era5 = data + "/era5.lstc";
    const std::string feats = data + "/features.lstc";

    check(run("fit-atc" + cfg + " --stack " + stack + " --era5 " + era5 + " --out " + data +
              "/ens") == 0,
          "fit-atc exits 0");
    check(fs::exists(fs::path(data) / "ens" / "manifest.json"), "ensemble manifest exists");

    check(run("fit-gp" + cfg + " --stack " + stack + " --era5 " + era5 + " --features " + feats +
              " --atc " + data + "/ens --out " + data + "/gp") == 0,
          "fit-gp exits 0");
    check(fs::exists(fs::path(data) / "gp" / "skips.json"), "gp skip list exists");

    check(run("reconstruct --stack " + stack + " --era5 " + era5 + " --features " + feats +
              " --atc " + data + "/ens --gp-dir " + data + "/gp --days 1..60 --out " + data +
              "/recon") == 0,
          "reconstruct exits 0");
    for (const char* suffix : {".lstc", "_mean.lstc", "_lower.lstc", "_upper.lstc",
                               "_var_atc.lstc", "_var_gp.lstc", "_source.lstc"})
        check(fs::exists(fs::path(data + "/recon" + suffix)),
              std::string("reconstruct wrote recon") + suffix);

    {
        std::string out;
        check(run("metrics --pred " + stack + " --truth " + stack, &out) == 0,
              "metrics exits 0");
        const nlohmann::json m = nlohmann::json::parse(out);
        check(m.at("rmse").get<double>() == 0.0, "identical cubes give RMSE 0");
        check(m.at("mae").get<double>() == 0.0, "identical cubes give MAE 0");
    }

    check(run("validate" + cfg + " --stack " + stack + " --era5 " + era5 + " --features " +
              feats + " --out " + data + "/report.json") == 0,
          "validate exits 0");
    {
        std::ifstream in(data + "/report.json");
        nlohmann::json report;
        in >> report;
        check(report.contains("strategy1") && report.contains("strategy2") &&
                  report.contains("strategy3"),
              "report has all three strategies");
        check(report.at("strategy3").at("status") == "skipped",
              "strategy 3 skipped without stations");
    }

    // ---- determinism across worker counts ----
    check(run("fit-atc" + cfg + " --workers 4 --stack " + stack + " --era5 " + era5 +
              " --out " + data + "/ens_w4") == 0,
          "fit-atc with 4 workers exits 0");
    bool identical = true;
    for (const char* f : {"C.lstc", "A.lstc", "PHI.lstc", "B.lstc"})
        identical = identical && file_bytes(fs::path(data) / "ens" / f) ==
                                     file_bytes(fs::path(data) / "ens_w4" / f);
    check(identical, "ensemble artifacts identical for 1 vs 4 workers");

    // seed is mandatory for stochastic subcommands
    check(run("fit-atc --stack " + stack + " --era5 " + era5 + " --out /tmp/ens_noseed") == 1,
          "fit-atc without any seed exits 1");

    std::printf("%s\n", g_failures == 0 ? "ALL CLI CHECKS PASSED" : "CLI CHECKS FAILED");
    return g_failures == 0 ? 0 : 1;
}
