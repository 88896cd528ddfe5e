// Command-line entry point: data generation, training, creation, ablation
// and the HTTP job server.

#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include <t2p/pipeline.hpp>
#include <t2p/server.hpp>

using namespace t2p;

namespace {

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> budget_seconds;
    std::string work = "work";
    std::string out;
};

RunConfig resolve_config(const Globals& g) {
    RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
    if (g.seed) {
        const std::uint64_t s = *g.seed;
        cfg.seed = cfg.data.seed = cfg.imitator.seed = cfg.translator.seed = s;
        cfg.imitator_train.seed = cfg.pretrain.seed = cfg.finetune.seed = s;
    }
    if (g.budget_seconds) cfg.budget_seconds = *g.budget_seconds;
    return cfg;
}

std::string slug(const std::string& prompt) {
    std::string out;
    for (char c : prompt) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else if (!out.empty() && out.back() != '-')
            out += '-';
    }
    while (!out.empty() && out.back() == '-') out.pop_back();
    return out.empty() ? "prompt" : out.substr(0, 60);
}

std::vector<std::string> read_prompt_file(const std::string& path) {
    std::vector<std::string> out;
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty() && line[0] != '#') out.push_back(line);
    return out;
}

httplib::Server* g_embed_server = nullptr;
JobServer* g_job_server = nullptr;

void on_signal(int) {
    if (g_embed_server) g_embed_server->stop();
    if (g_job_server) g_job_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-to-parameter character creation"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "Run configuration JSON")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Override every seed in the configuration");
    app.add_option("--budget-seconds", g.budget_seconds, "Wall-clock cap per creation (0 = unlimited)");
    app.add_option("--work", g.work, "Workspace holding dataset/, imitator/ and translator/")->capture_default_str();
    app.add_option("--out", g.out, "Output directory (defaults depend on the command)");

    auto* show = app.add_subcommand("show-config", "Print the resolved configuration");

    std::optional<std::size_t> n;
    auto* gen = app.add_subcommand("gen-data", "Render the training dataset into <work>/dataset");
    gen->add_option("--n", n, "Number of samples");

    std::optional<int> epochs;
    auto* ti = app.add_subcommand("train-imitator", "Train the imitator on <work>/dataset");
    ti->add_option("--epochs", epochs, "Training epochs");
    auto* pt = app.add_subcommand("pretrain-translator", "Pretrain the translator on <work>/dataset");
    pt->add_option("--epochs", epochs, "Training epochs");

    std::string prompt, mode = "full";
    auto* cr = app.add_subcommand("create", "Create parameters for a text prompt");
    cr->add_option("--prompt", prompt, "Text prompt")->required();
    cr->add_option("--mode", mode, "full | translator | evolution | fixed")->capture_default_str();

    std::string a_path, b_path;
    int steps = 10;
    auto* ip = app.add_subcommand("interpolate", "Interpolate between two parameter files");
    ip->add_option("--a", a_path, "First endpoint (beta = 1)")->required()->check(CLI::ExistingFile);
    ip->add_option("--b", b_path, "Second endpoint (beta = 0)")->required()->check(CLI::ExistingFile);
    ip->add_option("--steps", steps, "Number of intervals")->capture_default_str();

    std::string params_path, view = "front";
    std::optional<int> resolution;
    auto* rd = app.add_subcommand("render", "Render a parameter file to PPM and PNG");
    rd->add_option("--params", params_path, "Parameter file")->required()->check(CLI::ExistingFile);
    rd->add_option("--view", view, "front | side")->capture_default_str();
    rd->add_option("--resolution", resolution, "Render size in pixels");

    std::string prompts_path, modes_arg = "full,translator,evolution,fixed";
    std::size_t synthetic = 20;
    auto* ab = app.add_subcommand("ablate", "Run every mode over a prompt list and summarize");
    ab->add_option("--prompts", prompts_path, "File with one prompt per line")->check(CLI::ExistingFile);
    ab->add_option("--synthetic", synthetic, "Number of synthetic target prompts when --prompts is absent")
        ->capture_default_str();
    ab->add_option("--modes", modes_arg, "Comma-separated modes")->capture_default_str();

    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t workers = 1;
    auto* sv = app.add_subcommand("serve", "Serve the HTTP job API");
    sv->add_option("--host", host)->capture_default_str();
    sv->add_option("--port", port)->capture_default_str();
    sv->add_option("--workers", workers, "Concurrent creation jobs")->capture_default_str();

    int embed_port = 8600;
    auto* es = app.add_subcommand("embed-service", "Serve the configured embedder over the remote protocol");
    es->add_option("--host", host)->capture_default_str();
    es->add_option("--port", embed_port)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = resolve_config(g);
        const std::filesystem::path work = g.work;

        if (*show) {
            std::cout << nlohmann::json(cfg).dump(2) << '\n';
            return 0;
        }
        if (*gen) {
            if (n) cfg.data.count = *n;
            const std::filesystem::path root = g.out.empty() ? work : std::filesystem::path(g.out);
            Workspace ws = open_workspace(cfg, root, false);
            write_manifest(ws.dataset_dir(), ws.config, "gen-data");
            const auto ds = gen_data(ws);
            std::cout << "wrote " << ds.size() << " samples (" << ds.n_train << " train) to " << ws.dataset_dir() << '\n';
            return 0;
        }
        if (*ti || *pt) {
            if (epochs) (*ti ? cfg.imitator_train.epochs : cfg.pretrain.epochs) = *epochs;
            Workspace ws = open_workspace(cfg, work, false);
            const auto ds = load_workspace_dataset(ws);
            if (*ti) {
                write_manifest(ws.imitator_dir(), ws.config, "train-imitator");
                const auto r = train_imitator_cmd(ws, ds, [](const EpochStats& e) {
                    std::cout << "epoch " << e.epoch << " train_l1 " << e.train_l1 << " val_l1 " << e.val_l1 << '\n';
                });
                std::cout << "val L1 " << r.final_val_l1 << " (mean-image baseline " << r.baseline_l1 << ")\n";
            } else {
                write_manifest(ws.translator_dir(), ws.config, "pretrain-translator");
                const auto r = pretrain_translator_cmd(ws, ds, [](const PretrainEpoch& e) {
                    std::cout << "epoch " << e.epoch << " train_l1 " << e.train_l1 << " val_l1 " << e.val_l1 << '\n';
                });
                std::cout << "val L1 " << r.final_val_l1 << " (predict-mean baseline " << r.baseline_l1 << ")\n";
            }
            return 0;
        }
        if (*cr) {
            const CreateMode m = parse_mode(mode);
            const Workspace ws = open_workspace(cfg, work);
            const std::filesystem::path out =
                g.out.empty() ? work / "creations" / (slug(prompt) + "-" + mode) : std::filesystem::path(g.out);
            write_manifest(out, ws.config, "create", {{"prompt", prompt}, {"mode", mode}});
            const auto r = create(ws, prompt, m);
            write_creation(ws, r, out);
            std::printf("score %.2f (front %.2f, side %.2f) in %.1fs -> %s\n", 100.0 * r.score, 100.0 * r.views.front,
                        100.0 * r.views.side, r.seconds, out.c_str());
            return 0;
        }
        if (*ip) {
            const Workspace ws = open_workspace(cfg, work, false);
            const auto a = load_params(a_path, &ws.schema), b = load_params(b_path, &ws.schema);
            const std::filesystem::path out = g.out.empty() ? work / "interpolation" : std::filesystem::path(g.out);
            write_manifest(out, ws.config, "interpolate", {{"a", a_path}, {"b", b_path}, {"steps", steps}});
            const auto frames = interpolation_frames(a, b, steps);
            write_interpolation(ws, frames, out);
            std::cout << "wrote " << frames.size() << " frames to " << out << '\n';
            return 0;
        }
        if (*rd) {
            const Workspace ws = open_workspace(cfg, work, false);
            const auto p = load_params(params_path, &ws.schema);
            if (view != "front" && view != "side") throw ValidationError("--view must be front or side");
            const auto img = render(p, ws.layout, view == "front" ? View::front : View::side,
                                    resolution.value_or(ws.config.resolution));
            const std::filesystem::path out = g.out.empty() ? std::filesystem::path("render") : std::filesystem::path(g.out);
            std::filesystem::create_directories(out);
            save_ppm(out / (view + ".ppm"), img);
            write_text_file(out / (view + ".png"), encode_png(img));
            std::cout << "wrote " << (out / (view + ".ppm")) << " and .png\n";
            return 0;
        }
        if (*ab) {
            std::vector<CreateMode> modes;
            std::istringstream ms(modes_arg);
            for (std::string tok; std::getline(ms, tok, ',');)
                if (!tok.empty()) modes.push_back(parse_mode(tok));
            const auto prompts = prompts_path.empty() ? synthetic_prompts(synthetic) : read_prompt_file(prompts_path);
            const Workspace ws = open_workspace(cfg, work);
            const std::filesystem::path out = g.out.empty() ? work / "ablation" : std::filesystem::path(g.out);
            write_manifest(out, ws.config, "ablate", {{"modes", modes_arg}, {"prompts", prompts}});
            const auto rep = ablate(ws, prompts, modes, [](const std::string& p, CreateMode m, double s) {
                std::printf("%-32s %-10s %.2f\n", p.c_str(), mode_name(m).c_str(), 100.0 * s);
                std::fflush(stdout);
            });
            write_text_file(out / "scores.csv", rep.scores_csv());
            write_text_file(out / "summary.txt", rep.summary_table());
            std::cout << rep.summary_table();
            return 0;
        }
        if (*sv) {
            const Workspace ws = open_workspace(cfg, work);
            const std::filesystem::path jobs = g.out.empty() ? work / "jobs" : std::filesystem::path(g.out);
            JobServer server(ws, workers, jobs);
            g_job_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cout << "serving on http://" << host << ':' << port << std::endl;
            server.run(host, port);
            g_job_server = nullptr;
            return 0;
        }
        if (*es) {
            const Workspace ws = open_workspace(cfg, work, false);
            httplib::Server server;
            mount_embedding_service(server, *ws.backend);
            g_embed_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cout << "embedding service on http://" << host << ':' << embed_port << std::endl;
            if (!server.listen(host, embed_port))
                throw IoError("cannot listen on " + host + ":" + std::to_string(embed_port));
            return 0;
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
