#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <ctime>
#include <fstream>
#include <iostream>

#include "qsdp/cli.hpp"
#include "qsdp/errors.hpp"
#include "qsdp/wire_codec.hpp"

namespace qsdp::cli {
namespace {

nlohmann::json read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", std::string("config is not valid JSON: ") + e.what());
  }
}

// Writes to a sibling temporary file and renames it into place, so a failed
// run never leaves a partial output behind.
void write_atomically(const std::filesystem::path& out, const std::string& text) {
  std::filesystem::path tmp = out;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << text;
    if (!os.flush()) throw std::runtime_error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, out);
}

std::string timestamp_line(Command command) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &utc);
  return std::string("# qsdp ") + to_string(command) + " generated " + stamp + "\n";
}

}  // namespace

int tool_main(int argc, char** argv) {
  CLI::App app{"Quantized fully-sharded data-parallel experiments"};
  std::string command_name, config_path, out_path;
  bool no_timestamp = false;
  unsigned threads = 1;
  app.add_option("command", command_name,
                 "quant-stats | converge | train-sim | bandwidth-sweep | learn-levels")
      ->required();
  app.add_option("--config", config_path, "experiment config (JSON)")->required();
  app.add_option("--out", out_path, "output CSV path")->required();
  app.add_flag("--no-timestamp", no_timestamp, "omit the timestamp header line");
  app.add_option("--threads", threads, "worker threads")->check(CLI::Range(1u, 1024u));
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfigError;
  }

  const auto command = command_from_string(command_name);
  if (!command) {
    std::cerr << "qsdp: unknown command '" << command_name << "'\n";
    return kExitConfigError;
  }
  try {
    const auto config = read_config(config_path);
    const std::string body = run_command(*command, config, RunContext{threads});
    write_atomically(out_path, no_timestamp ? body : timestamp_line(*command) + body);
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "qsdp: config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const InvalidArgument& e) {
    std::cerr << "qsdp: config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const NumericalError& e) {
    std::cerr << "qsdp: numerical error: " << e.what() << '\n';
    return kExitNumericalError;
  } catch (const wire::DecodeError& e) {
    std::cerr << "qsdp: numerical error: " << e.what() << '\n';
    return kExitNumericalError;
  } catch (const std::exception& e) {
    std::cerr << "qsdp: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace qsdp::cli
