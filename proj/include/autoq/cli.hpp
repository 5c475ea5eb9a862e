#pragma once

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "autoq/search.hpp"

namespace autoq::cli {

namespace detail {

inline std::vector<int> parse_qbn_set(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ValidationError("qbn set: '" + item + "' is not an integer");
        }
    }
    if (out.empty()) throw ValidationError("qbn set: empty");
    return out;
}

struct CommonArgs {
    std::string net_path, hw_path;
    std::string mode = "accuracy";
    std::optional<double> budget_latency, budget_energy, budget_area;
    double psi_lat = 0.5, psi_energy = 0.5, psi_area = 0.5;
};

inline void add_common(CLI::App* cmd, CommonArgs& args, bool with_mode) {
    cmd->add_option("--net", args.net_path, "network spec JSON")->required();
    cmd->add_option("--hw", args.hw_path, "hardware config JSON")->required();
    if (with_mode) {
        cmd->add_option("--mode", args.mode, "search mode")
            ->check(CLI::IsMember({"resource", "accuracy"}))
            ->required();
        cmd->add_option("--budget-latency", args.budget_latency, "latency budget (s)");
        cmd->add_option("--budget-energy", args.budget_energy, "energy budget (J)");
        cmd->add_option("--budget-area", args.budget_area, "area budget (units)");
        cmd->add_option("--psi-lat", args.psi_lat, "latency exponent (accuracy mode)");
        cmd->add_option("--psi-energy", args.psi_energy, "energy exponent (accuracy mode)");
        cmd->add_option("--psi-area", args.psi_area, "area exponent (accuracy mode)");
    }
}

struct LoadedProblem {
    model::NetworkSpec net;
    cost::HardwareConfig hw;
    env::RewardWeights weights;
};

inline LoadedProblem load_problem(const CommonArgs& args) {
    LoadedProblem p;
    p.net = model::parse_network_spec(search::read_text_file(args.net_path));
    p.hw = cost::parse_hardware_config(search::read_text_file(args.hw_path));
    if (args.budget_latency) p.hw.budgets.latency_s = *args.budget_latency;
    if (args.budget_energy) p.hw.budgets.energy_j = *args.budget_energy;
    if (args.budget_area) p.hw.budgets.area_units = *args.budget_area;
    p.hw.validate();
    p.weights = args.mode == "resource"
                    ? env::RewardWeights::resource_constrained()
                    : env::RewardWeights::accuracy_guaranteed(args.psi_lat, args.psi_energy,
                                                              args.psi_area);
    p.weights.validate();
    return p;
}

inline std::string fmt(double v) { return search::detail::fmt_double(v); }

inline void print_report(std::ostream& os, const model::NetworkSpec& net,
                         const model::QbnPolicy& policy, const cost::CostReport& report) {
    os << "accuracy=" << fmt(report.accuracy) << "\n"
       << "latency_s=" << fmt(report.latency_s) << "\n"
       << "energy_j=" << fmt(report.energy_j) << "\n"
       << "area=" << fmt(report.area_units) << "\n"
       << "avg_wqbn=" << fmt(model::avg_weight_qbn(net, policy)) << "\n"
       << "avg_aqbn=" << fmt(model::avg_act_qbn(net, policy)) << "\n";
}

} // namespace detail

/// Entry point shared by the binary and the in-process CLI tests.
/// Exit codes: 0 success, 2 configuration/parse error, 3 infeasible budget.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    CLI::App app{"kernel-wise mixed-precision quantization search"};
    app.require_subcommand(1);

    detail::CommonArgs search_args, brute_args, baseline_args, eval_args;
    int episodes = 400;
    std::uint64_t seed = 0;
    std::string out_dir, qbn_set_csv = "0,1,2,3,4,5,6,7,8", baseline_set_csv = qbn_set_csv;
    std::string policy_path, pack_net, pack_policy, pack_out, unpack_net, unpack_policy, unpack_out;
    std::string brute_out, baseline_out;

    auto* search_cmd = app.add_subcommand("search", "hierarchical RL search");
    detail::add_common(search_cmd, search_args, true);
    search_cmd->add_option("--episodes", episodes, "training episodes")->capture_default_str();
    search_cmd->add_option("--seed", seed, "run seed")->capture_default_str();
    search_cmd->add_option("--out", out_dir, "output directory")->required();

    auto* brute_cmd = app.add_subcommand("brute", "exhaustive kernel-wise optimum");
    detail::add_common(brute_cmd, brute_args, true);
    brute_cmd->add_option("--qbn-set", qbn_set_csv, "comma-separated QBN values")
        ->capture_default_str();
    brute_cmd->add_option("--out", brute_out, "output directory");

    auto* baseline_cmd = app.add_subcommand("baseline", "exhaustive layer-wise optimum");
    detail::add_common(baseline_cmd, baseline_args, true);
    baseline_cmd->add_option("--qbn-set", baseline_set_csv, "comma-separated QBN values")
        ->capture_default_str();
    baseline_cmd->add_option("--out", baseline_out, "output directory");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a packed policy");
    detail::add_common(eval_cmd, eval_args, false);
    eval_cmd->add_option("--policy", policy_path, "policy binary")->required();

    auto* pack_cmd = app.add_subcommand("pack", "policy JSON -> binary");
    pack_cmd->add_option("--net", pack_net, "network spec JSON")->required();
    pack_cmd->add_option("--policy", pack_policy, "policy JSON")->required();
    pack_cmd->add_option("--out", pack_out, "output binary path")->required();

    auto* unpack_cmd = app.add_subcommand("unpack", "policy binary -> JSON");
    unpack_cmd->add_option("--net", unpack_net, "network spec JSON")->required();
    unpack_cmd->add_option("--policy", unpack_policy, "policy binary")->required();
    unpack_cmd->add_option("--out", unpack_out, "output JSON path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (search_cmd->parsed()) {
            auto problem = detail::load_problem(search_args);
            search::SearchOptions options;
            options.episodes = episodes;
            options.seed = seed;
            const auto result = search::run_search(problem.net, problem.hw, problem.weights, options);
            search::write_search_outputs(result, problem.net, out_dir);
            out << "best_reward=" << detail::fmt(result.best_reward) << "\n"
                << "best_episode=" << result.best_episode << "\n";
            detail::print_report(out, problem.net, result.best_policy, result.best_report);
            out << "outputs=" << out_dir << "\n";
        } else if (brute_cmd->parsed() || baseline_cmd->parsed()) {
            const bool is_brute = brute_cmd->parsed();
            auto problem = detail::load_problem(is_brute ? brute_args : baseline_args);
            const auto qbn_set = detail::parse_qbn_set(is_brute ? qbn_set_csv : baseline_set_csv);
            const auto result =
                is_brute ? search::brute_force_search(problem.net, problem.hw, problem.weights, qbn_set)
                         : search::layerwise_baseline_search(problem.net, problem.hw, problem.weights,
                                                             qbn_set);
            out << "optimal_reward=" << detail::fmt(result.reward) << "\n"
                << "evaluations=" << result.evaluations << "\n";
            detail::print_report(out, problem.net, result.policy, result.report);
            const std::string& dir = is_brute ? brute_out : baseline_out;
            if (!dir.empty()) {
                std::filesystem::create_directories(dir);
                search::write_file(std::filesystem::path(dir) / "policy.bin",
                                   model::encode_policy_file(result.policy, problem.net));
                search::write_file(std::filesystem::path(dir) / "policy.json",
                                   model::policy_to_json(result.policy, problem.net.name).dump(2) +
                                       "\n");
            }
        } else if (eval_cmd->parsed()) {
            auto problem = detail::load_problem(eval_args);
            const auto policy = model::decode_policy_file(
                search::read_binary_file(policy_path), problem.net);
            detail::print_report(out, problem.net, policy,
                                 search::evaluate_policy(problem.net, problem.hw, policy));
        } else if (pack_cmd->parsed()) {
            const auto net = model::parse_network_spec(search::read_text_file(pack_net));
            const auto policy = model::policy_from_json(
                nlohmann::json::parse(search::read_text_file(pack_policy)), net);
            search::write_file(pack_out, model::encode_policy_file(policy, net));
            out << "packed=" << pack_out << "\n";
        } else if (unpack_cmd->parsed()) {
            const auto net = model::parse_network_spec(search::read_text_file(unpack_net));
            const auto policy = model::decode_policy_file(
                search::read_binary_file(unpack_policy), net);
            search::write_file(unpack_out, model::policy_to_json(policy, net.name).dump(2) + "\n");
            out << "unpacked=" << unpack_out << "\n";
        }
    } catch (const InfeasibleBudgetError& e) {
        err << "infeasible budget: " << e.what() << "\n";
        return 3;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const SpaceTooLargeError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace autoq::cli
