#include <doctest.h>

#include <filesystem>
#include <set>

#include "syncast/checkpoint.hpp"
#include "syncast/config.hpp"
#include "syncast/plot.hpp"
#include "test_util.hpp"

using namespace syncast;
using namespace testutil;
using nlohmann::json;

namespace {

std::vector<TrainingPair> micro_pairs(const GridSpec& g, int levels, int n) {
    std::vector<TrainingPair> out;
    for (int k = 0; k < n; ++k) out.push_back({random_state(g, levels, 10 + k), random_state(g, levels, 50 + k)});
    return out;
}

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::Io;
}

}  // namespace

TEST_CASE("checkpoint round trip and corruption") {
    const ModelParams p = ModelParams::init(micro_config(8, 8, 2), 3);
    const Checkpoint ck = backbone_checkpoint(p, nullptr, 17);
    const auto bytes = encode_checkpoint(ck);
    CHECK(bytes == encode_checkpoint(ck));
    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(back.step == 17);
    CHECK(backbone_from_checkpoint(back) == p);

    auto bad = bytes;
    bad[bytes.size() / 2] ^= 1;
    CHECK(code_of([&] { decode_checkpoint(bad); }) == ErrorCode::ChecksumMismatch);
    bad = bytes;
    bad[0] = 'X';
    CHECK(code_of([&] { decode_checkpoint(bad); }) == ErrorCode::MagicMismatch);
    CHECK(code_of([&] { denoiser_from_checkpoint(back); }) == ErrorCode::HeaderMismatch);

    // f32 export keeps shapes and rounds values.
    const Checkpoint f = decode_checkpoint(encode_checkpoint(ck, "f32le"));
    const ModelParams pf = backbone_from_checkpoint(f);
    CHECK(pf.blocks[0].qkv.weight.data[5] == static_cast<double>(static_cast<float>(p.blocks[0].qkv.weight.data[5])));

    // A model of another shape cannot take these tensors.
    Checkpoint other = ck;
    other.config["embed_dim"] = 16;
    CHECK(code_of([&] { backbone_from_checkpoint(other); }) == ErrorCode::HeaderMismatch);
}

TEST_CASE("resume from a checkpoint file reproduces the uninterrupted run") {
    const GridSpec g = small_grid(8, 8);
    const auto pairs = micro_pairs(g, 2, 3);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.epochs = 3;
    const ModelConfig mc = micro_config(8, 8, 2);

    BackboneRun full = start_backbone_run(mc, cfg);
    continue_backbone(full, pairs, cfg, total_steps(pairs.size(), cfg));

    BackboneRun first = start_backbone_run(mc, cfg);
    continue_backbone(first, pairs, cfg, 4);
    const auto path = std::filesystem::temp_directory_path() / "syncast_resume_test.sck";
    write_checkpoint(backbone_checkpoint(first.params, &first.optimizer, first.step), path);
    const Checkpoint ck = read_checkpoint(path);
    BackboneRun resumed{backbone_from_checkpoint(ck), optimizer_from_checkpoint(ck, {cfg.learning_rate}), ck.step, {}};
    continue_backbone(resumed, pairs, cfg, total_steps(pairs.size(), cfg));
    CHECK(resumed.params == full.params);
    CHECK(encode_checkpoint(backbone_checkpoint(resumed.params, &resumed.optimizer, resumed.step)) ==
          encode_checkpoint(backbone_checkpoint(full.params, &full.optimizer, full.step)));
    std::filesystem::remove(path);
}

TEST_CASE("adapter and denoiser checkpoints") {
    const ModelParams base = ModelParams::init(micro_config(8, 8, 2), 1);
    LoraAdapterSet a = LoraAdapterSet::init(base, {4, 8.0, 0.0, true}, 2);
    randomize_adapters(a, 3, 0.1);
    const Checkpoint ck = decode_checkpoint(encode_checkpoint(adapter_checkpoint(a, nullptr, 5, "abc123")));
    CHECK(ck.base_hash == "abc123");
    const LoraAdapterSet back = adapters_from_checkpoint(ck, base);
    CHECK(back == a);
    CHECK(back.config.rank == 4);

    const DenoiserParams d = DenoiserParams::init(25, 8, 8, 4);
    CHECK(denoiser_from_checkpoint(decode_checkpoint(encode_checkpoint(denoiser_checkpoint(d, nullptr, 0)))) == d);

    const std::string h = sha256_hex("abc", 3);
    CHECK(h == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("run config: defaults, round trip, strictness") {
    const RunConfig def = run_config_from_json(json{{"version", 1}});
    CHECK(def.train.learning_rate == 1e-5);
    CHECK(def.train.epochs == 20);
    CHECK(def.diffusion.learning_rate == 1e-6);
    CHECK(def.diffusion.epochs == 5);
    CHECK(def.diffusion.batch_size == 1);

    RunConfig c;
    c.model = micro_config(16, 16, 4);
    c.data.synthetic.grid = small_grid(16, 16);
    c.data.synthetic.n_steps = 40;
    c.region = {true, 4, 8, 4, 8};
    c.train.max_steps = 9;
    c.diffusion.n_sample_steps = 20;
    c.climatology.delta = 0.5;
    c.metrics.lead_steps = {1, 3};
    const json j = to_json(c);
    const RunConfig back = run_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(config_hash(back) == config_hash(c));
    CHECK(config_hash(c).size() == 16);
    RunConfig d = c;
    d.climatology.delta = 0.6;
    CHECK(config_hash(d) != config_hash(c));

    auto message = [](const json& bad) {
        try {
            run_config_from_json(bad);
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::InvalidConfig);
            return std::string(e.what());
        }
        return std::string("no error");
    };
    json unknown = j;
    unknown["model"]["embed_dims"] = 8;
    CHECK(message(unknown).find("model.embed_dims") != std::string::npos);
    json top = j;
    top["extra"] = 1;
    CHECK(message(top).find("config.extra") != std::string::npos);
    CHECK(message(json{{"data", json::object()}}).find("version") != std::string::npos);
    CHECK(message(json{{"version", 2}}).find("version") != std::string::npos);
    json typed = j;
    typed["train"]["epochs"] = "many";
    CHECK(message(typed).find("train.epochs") != std::string::npos);
    json grid = j;
    grid["data"]["synthetic"]["grid"]["n_lat"] = 0;
    CHECK(message(grid).find("n_lat") != std::string::npos);
    json region = j;
    region["region"]["height"] = 99;
    CHECK(message(region).find("region") != std::string::npos);
}

TEST_CASE("PPM rendering") {
    std::vector<double> zero(12, 0.0);
    const auto img = render_field_ppm(zero, 3, 4, 0.0, 1.0, 2);
    const std::string header = "P6\n8 6\n255\n";
    REQUIRE(img.size() == header.size() + 8 * 6 * 3);
    CHECK(std::string(img.begin(), img.begin() + header.size()) == header);
    std::set<Rgb> colors;
    for (std::size_t k = header.size(); k < img.size(); k += 3) colors.insert({img[k], img[k + 1], img[k + 2]});
    CHECK(colors.size() == 1);
    CHECK(*colors.begin() == sequential_color(0.0));

    Rng rng(1);
    std::vector<double> f(12);
    for (auto& v : f) v = rng.uniform();
    CHECK(render_field_ppm(f, 3, 4, 0.0, 1.0, 3) == render_field_ppm(f, 3, 4, 0.0, 1.0, 3));
    // Values are anchored to the bounds, not to the data range.
    CHECK(sequential_color(2.0) == sequential_color(1.0));
    CHECK(render_field_ppm(f, 3, 4, 0.0, 2.0, 1) != render_field_ppm(f, 3, 4, 0.0, 1.0, 1));

    const auto diff = render_difference_ppm(f, f, 3, 4, 0.5, 1);
    for (std::size_t k = std::string("P6\n4 3\n255\n").size(); k < diff.size(); ++k) CHECK(diff[k] == 255);
    CHECK(diverging_color(-1.0) != diverging_color(1.0));
    CHECK_THROWS_AS(render_field_ppm(f, 3, 5, 0.0, 1.0, 1), Error);
}
