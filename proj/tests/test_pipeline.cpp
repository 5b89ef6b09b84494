#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mpcad/pipeline.hpp"

using namespace mpcad;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"(
# small stack for quick runs
epochs = 1
batch_size = 4
backbone.layers = 2
backbone.dim = 16
backbone.heads = 2
backbone.patch_size = 8
backbone.input_hw = 32
backbone.mlp_hidden = 32
backbone.tap_key_layer = 2
backbone.tap_score_layer = 2
synthetic.train_images = 4
synthetic.test_normal = 2
synthetic.test_anomalous = 2
synthetic.defect_area = 0.1
)";

RunConfig small(const std::string& extra = "") {
    std::istringstream in(std::string(kSmall) + extra);
    return parse_run_config(in);
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mpcad_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("defaults follow the training hyperparameters") {
    const RunConfig c;
    CHECK(c.seed == 42);
    CHECK(c.mode == DataMode::synthetic);
    CHECK(c.tasks.size() == 5);
    CHECK(c.train.epochs == 50);
    CHECK(c.train.batch_size == 8);
    CHECK(c.train.learning_rate == 5e-5);
    CHECK(c.train.alpha_fusion == 0.9);
    CHECK(c.train.k_sigmoid == 1.5);
    CHECK(c.backbone.tap_layer_score == 5);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config parsing") {
    std::istringstream in(
        "task.b.path = data/b   # comment\n"
        "tasks = a, b\n"
        "mode = images\n"
        "task.a.path = /abs/a\n"
        "alpha = 0.5\n"
        "delta_set = 0, 0.25, -0.25\n"
        "seed = 7\n");
    const RunConfig c = parse_run_config(in, "/base");
    REQUIRE(c.tasks.size() == 2);
    CHECK(c.tasks[0].path == "/abs/a");
    CHECK(c.tasks[1].path == "/base/data/b");
    CHECK(c.mode == DataMode::images);
    CHECK(c.train.alpha_fusion == 0.5);
    CHECK(c.train.delta_set == std::vector<double>{0, 0.25, -0.25});
    CHECK(c.seed == 7);
    CHECK(c.effective_train().seed == 7);
    CHECK_THROWS_AS(c.validate(), ConfigError);  // paths do not exist

    auto bad = [](const std::string& text) {
        std::istringstream s(text);
        return parse_run_config(s);
    };
    CHECK_THROWS_WITH_AS(bad("colour = red\n"), "unknown key 'colour'", ConfigError);
    CHECK_THROWS_AS(bad("epochs = many\n"), ConfigError);
    CHECK_THROWS_AS(bad("epochs = -3\n"), ConfigError);
    CHECK_THROWS_AS(bad("just words\n"), ConfigError);
    CHECK_THROWS_AS(bad("task.zz.path = x\n"), ConfigError);
    CHECK_THROWS_AS(bad("mode = video\n"), ConfigError);
    CHECK_THROWS_AS(bad("tasks = a\ntask.a.colour = x\n"), ConfigError);
    CHECK_THROWS_AS(bad("tasks = a, a\n").validate(), ConfigError);
    CHECK_THROWS_AS(bad("tasks = marble\n").validate(), ConfigError);
    CHECK_NOTHROW(bad("tasks = marble\ntask.marble.texture = dots\n").validate());
}

TEST_CASE("written config parses back to the same settings") {
    RunConfig c = small("tasks = dots, weave\nalpha = 0.75\nseed = 9\n");
    std::ostringstream a;
    write_run_config(a, c);
    std::istringstream in(a.str());
    std::ostringstream b;
    write_run_config(b, parse_run_config(in));
    CHECK(a.str() == b.str());
}

TEST_CASE("image files round trip") {
    const fs::path dir = scratch("pnm");
    Image rgb{3, 2, 3, {}};
    for (int i = 0; i < 18; ++i) rgb.pixels.push_back(i / 255.0);
    write_pnm(rgb, dir / "a.ppm");
    CHECK(read_pnm(dir / "a.ppm") == rgb);
    Image gray{1, 2, 2, {0.0, 1.0, 128 / 255.0, 3 / 255.0}};
    write_pnm(gray, dir / "g.pgm");
    CHECK(read_pnm(dir / "g.pgm") == gray);
    Image bad = gray;
    bad.pixels[0] = 1.5;
    CHECK_THROWS_AS(write_pnm(bad, dir / "b.pgm"), DataError);

    {
        std::ofstream f(dir / "c.pgm", std::ios::binary);
        f << "P5\n# comment\n2 1\n255\n" << '\x07' << '\x09';
    }
    const Gray8 g = read_pgm8(dir / "c.pgm");
    CHECK(g.values == std::vector<std::uint8_t>{7, 9});
    {
        std::ofstream f(dir / "d.pgm", std::ios::binary);
        f << "P5\n4 4\n255\n" << "abc";
    }
    CHECK_THROWS_AS(read_pgm8(dir / "d.pgm"), DataError);
    {
        std::ofstream f(dir / "e.pgm", std::ios::binary);
        f << "P2\n1 1\n255\n0";
    }
    CHECK_THROWS_AS(read_pgm8(dir / "e.pgm"), DataError);
}

TEST_CASE("mask resampling") {
    const std::vector<std::uint8_t> m{1, 0, 0, 1};
    CHECK(resize_mask(m, 2, 2, 2, 2) == m);
    CHECK(resize_mask(m, 2, 2, 4, 4) ==
          std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1});
    CHECK_THROWS_AS(resize_mask(m, 3, 2, 4, 4), DataError);
}

TEST_CASE("one task gives a 1x1 matrix and no forgetting measure") {
    const RunResult r = run_sequence(small("tasks = checker\n"));
    CHECK(r.image_auroc.k() == 1);
    CHECK(r.image_auroc.get(0, 0).has_value());
    CHECK_FALSE(r.fm_image_auroc.has_value());
    CHECK(r.bank.size() == 1);
    std::ostringstream os;
    write_results_table(os, r.final_rows, r.fm_image_auroc, r.fm_pixel_aupr);
    CHECK(os.str().find("avg_fm\tn/a\tn/a") != std::string::npos);
}

TEST_CASE("identical tasks under different names still complete") {
    const RunResult r =
        run_sequence(small("tasks = one, two\ntask.one.texture = dots\ntask.two.texture = dots\n"));
    CHECK(r.final_rows.size() == 2);
    CHECK(r.image_auroc.get(1, 0).has_value());
    CHECK(r.image_auroc.get(1, 1).has_value());
    CHECK(r.fm_image_auroc.has_value());
    CHECK(r.task_id_accuracy >= 0.0);
    CHECK(r.task_id_accuracy <= 1.0);
}

TEST_CASE("runs are deterministic and outputs complete") {
    const RunConfig c = small("tasks = stripes, grain\n");
    std::vector<std::size_t> stages;
    RunHooks hooks;
    hooks.after_stage = [&](std::size_t s, const MemoryBank& b, const Backbone&, const std::vector<TaskData>& d) {
        CHECK(b.size() == s + 1);
        CHECK(d.size() == s + 1);
        stages.push_back(s);
    };
    const RunResult a = run_sequence(c, hooks);
    const RunResult b = run_sequence(c);
    CHECK(stages == std::vector<std::size_t>{0, 1});
    CHECK(serialize_bank(a.bank) == serialize_bank(b.bank));
    CHECK(a.image_auroc == b.image_auroc);
    CHECK(a.pixel_aupr == b.pixel_aupr);

    const fs::path d1 = scratch("out1"), d2 = scratch("out2");
    write_run_outputs(a, c, d1);
    write_run_outputs(b, c, d2);
    for (const char* f : {"results.tsv", "image_auroc.tsv", "pixel_aupr.tsv", "ablation.tsv", "metadata.json",
                          "bank.cmpb", "config.cfg", "train_stripes.tsv", "train_grain.tsv"}) {
        CAPTURE(f);
        CHECK(fs::exists(d1 / f));
        CHECK(slurp(d1 / f) == slurp(d2 / f));
    }
    CHECK(slurp(d1 / "metadata.json").find("\"visual_prompt_tuning\": true") != std::string::npos);
    CHECK(load_bank(d1 / "bank.cmpb") == a.bank);
    CHECK(slurp(d1 / "image_auroc.tsv").find("stripes\t") != std::string::npos);

    // a stored bank re-evaluates to the final-stage numbers
    const RunResult e = evaluate_bank(c, load_bank(d1 / "bank.cmpb"));
    REQUIRE(e.final_rows.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(e.final_rows[i].image_auroc == a.final_rows[i].image_auroc);
        CHECK(e.final_rows[i].pixel_aupr == a.final_rows[i].pixel_aupr);
    }
    CHECK(e.task_id_accuracy == a.task_id_accuracy);
}

TEST_CASE("images and feature directories feed the same pipeline") {
    const fs::path dir = scratch("dirs");
    RunConfig c = small("tasks = dots\n");
    const SyntheticTask t = gen_synthetic(c.synthetic_spec(0), c.seed);
    save_task_images(t, dir / "img");
    const Backbone bb(c.backbone);
    save_task_features(t, bb, dir / "feat");

    RunConfig ci = c;
    ci.mode = DataMode::images;
    ci.tasks[0].path = dir / "img";
    const TaskData di = load_task(ci, 0);
    CHECK(di.train_images.images == t.train.images);
    CHECK(di.train_images.region_masks == t.train.region_masks);
    CHECK(di.test.labels == t.test_labels);

    RunConfig cf = c;
    cf.mode = DataMode::features;
    cf.tasks[0].path = dir / "feat";
    const TaskData df = load_task(cf, 0);
    CHECK(df.train_features.grids.size() == t.train.images.size());
    CHECK(df.train_features.region_masks == t.train.region_masks);
    CHECK(df.test.feature_mode());
    const RunResult r = run_sequence(cf);
    CHECK_FALSE(r.visual_prompt_tuning);
    CHECK(r.bank.at(0).visual_prompt.empty());
    CHECK(run_metadata_json(r, cf).find("\"mode\": \"features\"") != std::string::npos);

    // a broken file fails the run with the task named
    fs::remove(dir / "img" / "train" / "001.regions.pgm");
    CHECK_THROWS_WITH_AS(run_sequence(ci), doctest::Contains("task 'dots'"), DataError);
}
