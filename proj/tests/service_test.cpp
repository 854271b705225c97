#include <gtest/gtest.h>

#include <future>
#include <regex>
#include <sstream>
#include <thread>

#include "facaid/service.hpp"

using namespace facaid;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v(100);
  return v;
}

Model small_model() {
  auto c = desk_config(vocab());
  c.embed_dim = 16;
  c.enc_layers = c.dec_layers = 1;
  c.heads = 2;
  c.ff_mult = 2;
  return Model(c, 31);
}

json body(const Reply& r) { return json::parse(r.body); }

RectLayout parse_svg(const std::string& svg) {
  static const std::regex rect(
      R"re(<rect x="([^"]+)" y="([^"]+)" width="([^"]+)" height="([^"]+)" fill="[^"]+" data-label="([A-Za-z]+)"/>)re");
  RectLayout out;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), rect); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    const double x = std::stod(m[1]), y = std::stod(m[2]), w = std::stod(m[3]), h = std::stod(m[4]);
    out.rects.push_back({*parse_label(m[5].str()), x, 1.0 - y - h, w, h});
  }
  return out;
}

}  // namespace

TEST(Svg, SingleRectCoversViewBox) {
  auto svg = render_svg(RectLayout{{{TerminalLabel::Wall, 0, 0, 1, 1}}});
  EXPECT_NE(svg.find("viewBox=\"0 0 1 1\""), std::string::npos);
  auto back = parse_svg(svg);
  ASSERT_EQ(back.rects.size(), 1u);
  EXPECT_EQ(back.rects[0], (Rect{TerminalLabel::Wall, 0, 0, 1, 1}));
  EXPECT_NE(svg.find("fill=\"" + default_palette()[0] + "\""), std::string::npos);
}

TEST(Svg, FlipsAndOrdersRects) {
  RectLayout l{{{TerminalLabel::Window, 0.5, 0.75, 0.5, 0.25},
                {TerminalLabel::Door, 0.0, 0.0, 0.25, 0.5},
                {TerminalLabel::Shop, 0.25, 0.0, 0.75, 0.5},
                {TerminalLabel::Wall, 0.0, 0.5, 1.0, 0.25},
                {TerminalLabel::Wall, 0.0, 0.75, 0.5, 0.25}}};
  auto back = parse_svg(render_svg(l));
  ASSERT_EQ(back.rects.size(), 5u);
  // bottom row first; the Door sits at the bottom-left, so its SVG y is 0.5
  EXPECT_EQ(back.rects[0].label, TerminalLabel::Door);
  EXPECT_NE(render_svg(l).find("<rect x=\"0\" y=\"0.5\" width=\"0.25\" height=\"0.5\""), std::string::npos);
  EXPECT_EQ(back.rects[1].label, TerminalLabel::Shop);
  EXPECT_EQ(back.rects[2].label, TerminalLabel::Wall);
  EXPECT_EQ(back.rects[3].label, TerminalLabel::Wall);
  EXPECT_EQ(back.rects[4].label, TerminalLabel::Window);
  auto shuffled = l;
  std::reverse(shuffled.rects.begin(), shuffled.rects.end());
  EXPECT_EQ(render_svg(shuffled), render_svg(l));
}

TEST(Svg, GeneratorRendersTile) {
  for (std::uint64_t i = 0; i < 50; ++i) {
    auto rec = generate_record(12, i);
    auto back = parse_svg(render_svg(rec.layout));
    ASSERT_EQ(back.rects.size(), rec.layout.rects.size());
    auto audit = audit_tiling(back);
    EXPECT_NEAR(audit.area, 1.0, 1e-9);
    EXPECT_EQ(audit.overlapping_pairs, 0u);
    EXPECT_TRUE(audit.ok());
  }
}

TEST(Config, ParsesKeyValues) {
  std::istringstream in("# comment\n\ntrain.learning_rate = 3e-4\ntrain.batch_size=16\n  model.dropout = 0.2  \n"
                        "optimize.step = 0.1\nserve.port = 9000\nserve.cors = true\ninfer.temperature = 0.7\n");
  auto s = parse_settings(in);
  TrainConfig tc;
  ModelConfig mc;
  OptimizeConfig oc;
  ServiceConfig sc;
  DecodeConfig dc;
  apply_settings(s, tc);
  apply_settings(s, mc);
  apply_settings(s, oc);
  apply_settings(s, sc);
  apply_settings(s, dc);
  EXPECT_EQ(tc.learning_rate, 3e-4);
  EXPECT_EQ(tc.batch_size, 16);
  EXPECT_EQ(tc.epochs, TrainConfig{}.epochs);
  EXPECT_EQ(mc.dropout, 0.2);
  EXPECT_EQ(oc.step, 0.1);
  EXPECT_EQ(sc.port, 9000);
  EXPECT_TRUE(sc.cors);
  EXPECT_EQ(dc.temperature, 0.7);

  std::istringstream typo("train.learning_rat = 1\n");
  auto t = parse_settings(typo);
  EXPECT_THROW(apply_settings(t, tc), Error);
  apply_settings(t, oc);  // other sections ignore it
  std::istringstream junk("train.batch_size = lots\n");
  EXPECT_THROW(apply_settings(parse_settings(junk), tc), Error);
  std::istringstream no_eq("just words\n");
  EXPECT_THROW(parse_settings(no_eq), Error);
  sc.port = 70000;
  EXPECT_THROW(sc.validate(), Error);
}

TEST(Service, EndpointsMatchLibrary) {
  const Service svc;
  auto g = svc.handle("GET", "/grammar", "");
  ASSERT_EQ(g.status, 200);
  EXPECT_EQ(body(g)["grammar"], grammar_to_json());
  EXPECT_EQ(body(g)["hash"], grammar_hash());

  auto gen = svc.handle("POST", "/generate", R"({"seed": 42})");
  ASSERT_EQ(gen.status, 200);
  EXPECT_EQ(body(gen), record_to_json(generate_facade(sample_style(42), 42)));
  auto styled = generate_record(3, 3);
  auto gen2 = svc.handle("POST", "/generate", json{{"seed", 5}, {"style", style_to_json(styled.style)}}.dump());
  EXPECT_EQ(body(gen2), record_to_json(generate_facade(styled.style, 5)));

  auto rec = generate_record(6, 1);
  auto ex = svc.handle("POST", "/execute", json{{"tree", tree_to_json(rec.tree)}}.dump());
  ASSERT_EQ(ex.status, 200);
  EXPECT_EQ(layout_from_json(body(ex)["layout"]), execute(rec.tree));

  auto r = svc.handle("POST", "/render", json{{"layout", layout_to_json(rec.layout)}}.dump());
  EXPECT_EQ(r.content_type, "image/svg+xml");
  EXPECT_EQ(r.body, render_svg(rec.layout));

  auto nz = svc.handle("POST", "/noise", json{{"layout", layout_to_json(rec.layout)}, {"level", 0.05}, {"seed", 9}}.dump());
  ASSERT_EQ(nz.status, 200);
  auto expect = inject_noise(rec.layout, 0.05, 9);
  EXPECT_EQ(layout_from_json(body(nz)["layout"]), expect.layout);
  EXPECT_EQ(body(nz)["achieved"].get<double>(), expect.achieved);

  auto inf = svc.handle("POST", "/infer", json{{"layout", layout_to_json(rec.layout)}}.dump());
  EXPECT_EQ(inf.status, 409);
  EXPECT_EQ(body(inf)["code"], "model_unavailable");
}

TEST(Service, OptimizeRoundTrip) {
  const Service svc;
  auto rec = generate_record(6, 2);
  auto start = default_sizing(strip_sizing(rec.tree));
  auto res = svc.handle("POST", "/optimize",
                        json{{"tree", tree_to_json(start)}, {"target", layout_to_json(rec.layout)},
                             {"cfg", {{"width", 64}, {"height", 64}, {"max_iterations", 300}}}}.dump());
  ASSERT_EQ(res.status, 200) << res.body;
  auto j = body(res);
  OptimizeConfig cfg;
  cfg.width = cfg.height = 64;
  cfg.max_iterations = 300;
  auto fit = optimize_sizing(start, rec.layout, cfg);
  EXPECT_EQ(j["trace"].get<std::vector<double>>(), fit.trace);
  EXPECT_EQ(tree_from_json(j["tree"]), fit.tree);
  const double before = pixel_difference(hard_rasterize(execute(start), 64, 64), hard_rasterize(rec.layout, 64, 64));
  const double after = pixel_difference(hard_rasterize(layout_from_json(j["layout"]), 64, 64), hard_rasterize(rec.layout, 64, 64));
  EXPECT_LT(after, before);
  EXPECT_LE(j["trace"].back().get<double>(), j["trace"].front().get<double>());

  auto bad = svc.handle("POST", "/optimize", json{{"tree", tree_to_json(start)}, {"target", layout_to_json(rec.layout)},
                                                  {"cfg", {{"widht", 64}}}}.dump());
  EXPECT_EQ(bad.status, 400);
}

TEST(Service, ErrorsAreMachineReadable) {
  const Service svc;
  auto check = [&](const std::string& path, const std::string& b, int status, const std::string& code) {
    auto r = svc.handle("POST", path, b);
    EXPECT_EQ(r.status, status) << path << " " << b;
    auto j = body(r);
    EXPECT_EQ(j["code"], code) << r.body;
    EXPECT_TRUE(j["detail"].is_string());
  };
  check("/execute", "{not json", 400, "bad_input");
  check("/execute", "[1,2]", 400, "bad_input");
  check("/execute", "{}", 400, "bad_input");
  check("/execute", R"({"tree": {"root": {"prod": "P99"}}})", 400, "invalid_tree");
  auto t = tree_to_json(generate_record(1, 1).tree);
  t["root"]["children"].erase(0);
  check("/execute", json{{"tree", t}}.dump(), 400, "invalid_tree");
  check("/noise", R"({"layout": {"rects": []}, "level": 0.9, "seed": 1})", 400, "bad_input");
  check("/generate", R"({"seed": -3})", 400, "bad_input");
  check("/nowhere", "{}", 404, "not_found");
  RectLayout many;
  for (int i = 0; i < 120; ++i) many.rects.push_back({TerminalLabel::Wall, 0, 0, 1, 1});
  Service with_model;
  with_model.set_model(small_model());
  auto r = with_model.handle("POST", "/infer", json{{"layout", layout_to_json(many)}}.dump());
  EXPECT_EQ(r.status, 413);
  EXPECT_EQ(body(r)["code"], "too_many_rects");
}

TEST(Service, ConcurrentHttpRequests) {
  ServiceConfig cfg;
  cfg.threads = 8;
  cfg.cors = true;
  Service svc(cfg);
  svc.set_model(small_model());
  const int port = svc.bind(true);
  std::thread server([&] { svc.listen(); });
  svc.wait_until_ready();

  const Model reference = small_model();
  std::vector<std::future<std::string>> jobs;
  for (int k = 0; k < 24; ++k) {
    jobs.push_back(std::async(std::launch::async, [&, k] {
      httplib::Client cli("127.0.0.1", port);
      cli.set_read_timeout(120);
      auto rec = generate_record(50, static_cast<std::uint64_t>(k));
      bool good = true;
      std::string why;
      auto note = [&](const httplib::Result& res) {
        why = res ? std::to_string(res->status) + " " + res->body.substr(0, 200) : httplib::to_string(res.error());
      };
      if (k % 3 == 0) {
        auto res = cli.Post("/infer", json{{"layout", layout_to_json(rec.layout)}}.dump(), "application/json");
        note(res);
        good = res && res->status == 200 &&
               tree_from_json(json::parse(res->body)["tree"]) == infer_procedure(reference, rec.layout, vocab()).tree;
      } else if (k % 3 == 1) {
        auto res = cli.Post("/execute", json{{"tree", tree_to_json(rec.tree)}}.dump(), "application/json");
        note(res);
        good = res && res->status == 200 && layout_from_json(json::parse(res->body)["layout"]) == rec.layout;
      } else {
        auto res = cli.Post("/generate", json{{"seed", k}}.dump(), "application/json");
        note(res);
        good = res && res->status == 200 && res->get_header_value("Access-Control-Allow-Origin") == "*" &&
               json::parse(res->body) == record_to_json(generate_facade(sample_style(static_cast<std::uint64_t>(k)),
                                                                         static_cast<std::uint64_t>(k)));
      }
      return good ? std::string() : "request " + std::to_string(k) + ": " + why;
    }));
  }
  for (auto& j : jobs) EXPECT_EQ(j.get(), "");

  httplib::Client cli("127.0.0.1", port);
  auto g = cli.Get("/grammar");
  ASSERT_TRUE(g);
  EXPECT_EQ(json::parse(g->body)["hash"], grammar_hash());
  auto missing = cli.Get("/absent");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body)["code"], "not_found");
  svc.stop();
  server.join();
}

TEST(Service, BindAndCheckpointFailures) {
  ServiceConfig cfg;
  cfg.model_path = "/nonexistent/model.bin";
  try {
    Service s(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CheckpointLoadFailure);
  }
  ServiceConfig foreign;
  foreign.host = "192.0.2.1";  // documentation range, never a local address
  Service b(foreign);
  try {
    b.bind();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BindFailure);
  }
}
