#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>

#include <json.hpp>

#include "facaid/config.hpp"
#include "facaid/decoder.hpp"
#include "facaid/generator.hpp"
#include "facaid/io.hpp"
#include "facaid/sizing.hpp"
#include "facaid/svg.hpp"

// after Eigen: <resolv.h> defines a `_res` macro that breaks Eigen headers
#ifndef CPPHTTPLIB_LISTEN_BACKLOG
#define CPPHTTPLIB_LISTEN_BACKLOG 128
#endif
#include <httplib.h>

namespace facaid {

struct Reply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

inline Reply error_reply(int status, std::string_view code, const std::string& detail) {
  return {status, json{{"code", code}, {"detail", detail}}.dump()};
}

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::ModelUnavailable: return 409;
    case ErrorCode::LengthExceeded:
    case ErrorCode::TooManyRects: return 413;
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::CheckpointLoadFailure:
    case ErrorCode::Divergence: return 500;
    default: return 400;
  }
}

inline OptimizeConfig optimize_config_from_json(const json& j) {
  OptimizeConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw Error(ErrorCode::BadInput, "/cfg: expected an object");
  Settings s;
  for (const auto& [k, v] : j.items())
    s.values["optimize." + k] = v.is_string() ? v.get<std::string>() : v.dump();
  apply_settings(s, c);
  c.validate();
  return c;
}

/// Request handling without sockets; the HTTP server forwards to `handle`.
class Service {
 public:
  explicit Service(ServiceConfig cfg = {}) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (!cfg_.model_path.empty()) set_model(load_checkpoint(cfg_.model_path));
  }

  void set_model(Model m) {
    vocab_ = std::make_unique<Vocabulary>(m.config().resolution);
    model_ = std::make_unique<const Model>(std::move(m));
  }
  bool has_model() const { return model_ != nullptr; }
  const ServiceConfig& config() const { return cfg_; }

  Reply handle(const std::string& method, const std::string& path, const std::string& body) const {
    try {
      if (method == "GET" && path == "/grammar")
        return ok({{"grammar", grammar_to_json()}, {"hash", grammar_hash()}});
      if (method != "POST") return error_reply(404, "not_found", method + " " + path);
      json req;
      try {
        req = json::parse(body);
      } catch (const json::exception& e) {
        return error_reply(400, error_code_name(ErrorCode::BadInput), std::string("malformed JSON: ") + e.what());
      }
      if (!req.is_object()) return error_reply(400, error_code_name(ErrorCode::BadInput), "body must be an object");
      if (path == "/generate") return generate(req);
      if (path == "/execute") return ok({{"layout", layout_to_json(execute(tree_from_json(field(req, "tree"))))}});
      if (path == "/infer") return infer(req);
      if (path == "/optimize") return optimize(req);
      if (path == "/render")
        return {200, render_svg(layout_from_json(field(req, "layout"))), "image/svg+xml"};
      if (path == "/noise") return noise(req);
      return error_reply(404, "not_found", method + " " + path);
    } catch (const Error& e) {
      return error_reply(http_status(e.code()), error_code_name(e.code()), e.detail());
    } catch (const json::exception& e) {
      return error_reply(400, error_code_name(ErrorCode::BadInput), e.what());
    } catch (const std::exception& e) {
      return error_reply(500, "internal", e.what());
    }
  }

  /// Binds the configured port, or any free port when `any_port` is set.
  /// Returns the bound port.
  int bind(bool any_port = false) {
    server_ = std::make_unique<httplib::Server>();
    const int threads = cfg_.threads;
    server_->new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    server_->set_payload_max_length(cfg_.max_body_bytes);
    auto forward = [this](const httplib::Request& req, httplib::Response& res) {
      auto r = handle(req.method, req.path, req.body);
      res.status = r.status;
      res.set_content(r.body, r.content_type);
    };
    server_->Get("/grammar", forward);
    server_->Post(R"(/[a-z]+)", forward);
    if (!cfg_.static_dir.empty() && !server_->set_mount_point("/", cfg_.static_dir))
      throw Error(ErrorCode::BadInput, "static directory " + cfg_.static_dir + " does not exist");
    server_->set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      const bool large = res.status == 413;
      res.set_content(json{{"code", large ? "payload_too_large" : "not_found"},
                           {"detail", req.method + " " + req.path}}.dump(),
                      "application/json");
    });
    if (cfg_.cors) {
      server_->set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Origin", "*");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      });
      server_->Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    }
    const int port = any_port ? server_->bind_to_any_port(cfg_.host)
                                    : (server_->bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1);
    if (port < 0) throw Error(ErrorCode::BindFailure, cfg_.host + ":" + std::to_string(cfg_.port));
    return port;
  }

  /// Blocks until `stop`.
  void listen() {
    if (!server_) bind();
    server_->listen_after_bind();
  }

  void stop() {
    if (server_) server_->stop();
  }

  void wait_until_ready() const {
    if (server_) server_->wait_until_ready();
  }

 private:
  static Reply ok(const json& j) { return {200, j.dump()}; }

  static const json& field(const json& req, const char* name) {
    if (!req.contains(name)) throw Error(ErrorCode::BadInput, std::string("/") + name + ": missing");
    return req[name];
  }

  static std::uint64_t seed_of(const json& req) {
    const auto& s = field(req, "seed");
    if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<std::int64_t>() >= 0))
      throw Error(ErrorCode::BadInput, "/seed: expected a non-negative integer");
    return s.get<std::uint64_t>();
  }

  static Reply generate(const json& req) {
    const auto seed = seed_of(req);
    const auto style = req.contains("style") ? style_from_json(req["style"]) : sample_style(seed);
    return ok(record_to_json(generate_facade(style, seed)));
  }

  Reply infer(const json& req) const {
    if (!model_) return error_reply(409, error_code_name(ErrorCode::ModelUnavailable), "no model loaded");
    DecodeConfig dc;
    if (req.contains("temperature")) dc.temperature = req["temperature"].get<double>();
    if (req.contains("seed")) dc.seed = seed_of(req);
    if (req.contains("prefix")) dc.resume_prefix = req["prefix"].get<std::vector<Token>>();
    auto out = infer_procedure(*model_, layout_from_json(field(req, "layout")), *vocab_, dc);
    return ok({{"tree", tree_to_json(out.tree)}, {"tokens", out.tokens}});
  }

  static Reply optimize(const json& req) {
    const auto cfg = optimize_config_from_json(req.contains("cfg") ? req["cfg"] : json());
    auto fit = optimize_sizing(tree_from_json(field(req, "tree")), layout_from_json(field(req, "target")), cfg);
    const auto fitted = execute(fit.tree);
    return ok({{"tree", tree_to_json(fit.tree)},
               {"layout", layout_to_json(fitted)},
               {"trace", fit.trace},
               {"iterations", fit.iterations},
               {"converged", fit.converged}});
  }

  static Reply noise(const json& req) {
    auto r = inject_noise(layout_from_json(field(req, "layout")), field(req, "level").get<double>(), seed_of(req));
    return ok({{"layout", layout_to_json(r.layout)}, {"achieved", r.achieved}, {"reached", r.reached}});
  }

  ServiceConfig cfg_;
  std::unique_ptr<const Model> model_;
  std::unique_ptr<Vocabulary> vocab_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace facaid
