#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include "transitq/catalog.hpp"
#include "transitq/eval/compare.hpp"
#include "transitq/eval/questions.hpp"
#include "transitq/eval/runs.hpp"
#include "transitq/exemplars.hpp"
#include "transitq/gtfs/database.hpp"
#include "transitq/gtfs/feed.hpp"
#include "transitq/gtfs/municipality.hpp"
#include "transitq/log.hpp"
#include "transitq/service.hpp"

using namespace transitq;

namespace {

service::AppConfig load_config(const std::string& path) {
  if (path.empty()) return service::AppConfig::from_json(nlohmann::json::object(), std::filesystem::current_path());
  return service::AppConfig::load(path);
}

gtfs::Date reference_date(const service::AppConfig& cfg, const std::string& override_iso) {
  if (!override_iso.empty()) {
    auto d = gtfs::Date::parse_iso(override_iso);
    if (!d) throw ConfigError("--date must be YYYY-MM-DD");
    return *d;
  }
  if (cfg.eval.contains("reference_date")) {
    auto d = gtfs::Date::parse_iso(cfg.eval["reference_date"].get<std::string>());
    if (!d) throw ConfigError("eval.reference_date must be YYYY-MM-DD");
    return *d;
  }
  return cfg.agent.reference_date.value_or(gtfs::Date::today());
}

int ingest(const std::vector<std::string>& feeds, const std::vector<std::string>& tags, const std::string& municipalities,
           const std::string& db_path) {
  if (feeds.size() != tags.size()) throw ConfigError("every --feed needs a matching --tag");
  auto started = std::chrono::steady_clock::now();
  std::vector<gtfs::FeedBundle> bundles;
  for (std::size_t i = 0; i < feeds.size(); ++i) {
    bundles.push_back(gtfs::parse_feed(feeds[i], tags[i]));
    for (const auto& issue : bundles.back().issues)
      log::warn(tags[i] + ": " + issue.file + ":" + std::to_string(issue.line) + ": " + issue.message);
  }
  auto areas = municipalities.empty() ? std::vector<gtfs::MunicipalityRecord>{} : gtfs::load_municipalities(municipalities);
  gtfs::BuildReport report;
  auto conn = gtfs::build_database(db_path, std::move(bundles), areas, &report);
  auto violations = gtfs::foreign_key_violations(conn);
  for (const auto& [table, n] : report.rows_per_table) std::cout << table << ": " << n << " rows\n";
  std::cout << "stops without municipality: " << report.unassigned_stops << "\n";
  std::cout << "integrity violations: " << violations.size() << "\n";
  auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started).count();
  std::cout << "wrote " << db_path << " in " << ms << " ms\n";
  return violations.empty() ? 0 : 1;
}

int catalog_render(const std::string& db_path, const std::string& annotations, const std::string& date) {
  db::Connection conn(db_path, db::Connection::Mode::read_only);
  auto notes = annotations.empty() ? catalog::Annotations{} : catalog::Annotations::load(annotations);
  auto cat = catalog::Catalog::describe(conn, notes);
  for (const auto& w : cat.warnings()) log::warn(w.code + ": " + w.message);
  auto day = date.empty() ? gtfs::Date::today() : gtfs::Date::parse_iso(date).value_or(gtfs::Date::today());
  std::cout << catalog::render_prompt(catalog::make_document(cat, catalog::default_rules(day))) << "\n";
  return 0;
}

int build_index(const std::string& db_path, const std::string& config_path, const std::string& exemplars_path,
                const std::string& out) {
  auto cfg = load_config(config_path);
  db::Connection conn(db_path, db::Connection::Mode::read_only);
  sql::Guard guard(sql::SchemaInfo::introspect(conn), cfg.guard);
  auto providers = provider::make_providers(cfg.provider, cfg.base_dir);
  std::filesystem::path source = exemplars_path.empty() ? cfg.exemplars : std::filesystem::path(exemplars_path);
  auto pairs = exemplars::load_exemplars(source, guard, &conn);
  exemplars::ExemplarStore store(std::move(pairs), *providers.embedder);
  std::filesystem::path target =
      !out.empty() ? std::filesystem::path(out) : cfg.exemplar_index.value_or(service::default_index_path(db_path));
  std::ofstream(target) << store.index_json().dump(2) << "\n";
  std::cout << "indexed " << store.pairs().size() << " exemplars with " << store.provider_identity() << " into "
            << target.string() << "\n";
  return 0;
}

httplib::Server* g_server = nullptr;

int serve(const std::string& db_path, const std::string& config_path, const std::string& host, int port) {
  auto cfg = load_config(config_path);
  auto svc = service::Service::create(db_path, cfg);
  httplib::Server svr;
  svc->mount(svr);
  g_server = &svr;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  log::info("listening on " + host + ":" + std::to_string(port));
  if (!svr.listen(host, port)) throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
  return 0;
}

int ask(const std::string& db_path, const std::string& config_path, const std::string& question) {
  auto cfg = load_config(config_path);
  cfg.service.run_store.clear();
  auto svc = service::Service::create(db_path, cfg);
  auto reply = svc->chat(nlohmann::json{{"message", question}}.dump());
  std::cout << reply.body.dump(2) << "\n";
  return reply.status == 200 ? 0 : 1;
}

int eval_expand(const std::string& store_path, const std::string& db_path, const std::string& config_path,
                std::uint64_t seed, const std::string& date) {
  auto cfg = load_config(config_path);
  auto ec = eval::ExpandConfig::from_json(cfg.eval);
  ec.seed = seed;
  ec.reference_date = reference_date(cfg, date);
  db::Connection conn(db_path, db::Connection::Mode::read_only);
  sql::Guard guard(sql::SchemaInfo::introspect(conn), cfg.guard);
  std::shared_ptr<provider::CompletionProvider> paraphraser;
  if (ec.paraphrase) paraphraser = provider::make_providers(cfg.provider, cfg.base_dir).chat;
  auto questions = eval::expand_templates(conn, ec, paraphraser.get());
  auto gold = eval::build_gold(questions, conn, guard, ec.reference_date);
  eval::RunStore store(store_path);
  store.save_questions(questions, gold);
  for (const auto& q : questions)
    std::cout << q.id << " [" << q.template_id << (q.injected_invalid ? ", invalid" : "") << "] " << q.text << "\n";
  std::cout << questions.size() << " questions written to " << store_path << "\n";
  return 0;
}

int eval_run(const std::string& store_path, const std::string& endpoint, int repeats, int parallel) {
  eval::RunStore store(store_path);
  auto questions = store.questions();
  if (questions.empty()) throw ConfigError("no questions in " + store_path + "; run `eval expand` first");
  store.clear_runs();
  eval::SuiteOptions opts;
  opts.repeats = repeats;
  opts.parallelism = parallel;
  auto result = eval::run_suite(questions, eval::http_transport(endpoint), opts, &store);
  int complete = 0;
  for (const auto& r : result.records) complete += r.complete();
  std::cout << result.records.size() << " attempts recorded, " << complete << " complete"
            << (result.partial ? " (partial: endpoint unreachable)" : "") << "\n";
  return result.partial ? 2 : 0;
}

int eval_grade(const std::string& store_path, const std::string& db_path, double tolerance) {
  eval::RunStore store(store_path);
  db::Connection conn(db_path, db::Connection::Mode::read_only);
  auto outcomes = eval::grade_store(store, conn, tolerance);
  std::cout << outcomes.size() << " attempts graded\n";
  return 0;
}

int eval_report(const std::string& store_path, const std::string& format) {
  eval::RunStore store(store_path);
  auto summary = eval::summarize(store.outcomes());
  if (format == "json") std::cout << eval::report_json(summary).dump(2) << "\n";
  else std::cout << eval::report_text(summary);
  if (store.partial()) std::cerr << "note: the last run was partial\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Natural-language questions over GTFS timetables"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  std::vector<std::string> feeds, tags;
  std::string municipalities, db_path, config_path, annotations, date, out, exemplars_path, host = "0.0.0.0";
  std::string store_path = "eval.db", endpoint, format = "text", question;
  int port = 8080, repeats = 1, parallel = 1;
  std::uint64_t seed = 1;
  double tolerance = eval::kDefaultScalarTolerance;

  auto* ing = app.add_subcommand("ingest", "Load GTFS feeds into a database");
  ing->add_option("--feed", feeds, "Feed directory (repeatable)")->required()->check(CLI::ExistingDirectory);
  ing->add_option("--tag", tags, "Agency tag for the feed at the same position")->required();
  ing->add_option("--municipalities", municipalities, "Municipality boundaries (GeoJSON)")->check(CLI::ExistingFile);
  ing->add_option("--db", db_path, "Output database")->required();

  auto* cat = app.add_subcommand("catalog", "Schema catalog");
  cat->require_subcommand(1);
  auto* render = cat->add_subcommand("render", "Print the generation prompt without exemplars");
  render->add_option("--db", db_path)->required()->check(CLI::ExistingFile);
  render->add_option("--annotations", annotations)->check(CLI::ExistingFile);
  render->add_option("--date", date, "Current date for the rules (YYYY-MM-DD)");

  auto* ex = app.add_subcommand("exemplars", "Question/SQL exemplars");
  ex->require_subcommand(1);
  auto* idx = ex->add_subcommand("build-index", "Embed the exemplar questions");
  idx->add_option("--db", db_path)->required()->check(CLI::ExistingFile);
  idx->add_option("--config", config_path)->check(CLI::ExistingFile);
  idx->add_option("--exemplars", exemplars_path)->check(CLI::ExistingFile);
  idx->add_option("--out", out, "Index file (default: <db>.exemplars.json)");

  auto* srv = app.add_subcommand("serve", "Run the HTTP API");
  srv->add_option("--db", db_path)->required()->check(CLI::ExistingFile);
  srv->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  srv->add_option("--port", port)->check(CLI::Range(1, 65535));
  srv->add_option("--host", host);

  auto* ak = app.add_subcommand("ask", "Answer one question and print the response");
  ak->add_option("--db", db_path)->required()->check(CLI::ExistingFile);
  ak->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  ak->add_option("question", question)->required();

  auto* ev = app.add_subcommand("eval", "Evaluation harness");
  ev->require_subcommand(1);
  auto* expand = ev->add_subcommand("expand", "Generate questions and gold queries");
  expand->add_option("--seed", seed)->required();
  expand->add_option("--db", db_path)->required()->check(CLI::ExistingFile);
  expand->add_option("--config", config_path)->check(CLI::ExistingFile);
  expand->add_option("--store", store_path, "Run-store database")->capture_default_str();
  expand->add_option("--date", date, "Reference date (YYYY-MM-DD)");
  auto* run = ev->add_subcommand("run", "Ask the stored questions through the API");
  run->add_option("--endpoint", endpoint, "e.g. http://127.0.0.1:8080")->required();
  run->add_option("--repeats", repeats)->required()->check(CLI::PositiveNumber);
  run->add_option("--parallel", parallel)->check(CLI::PositiveNumber);
  run->add_option("--store", store_path)->capture_default_str();
  auto* grade = ev->add_subcommand("grade", "Compare stored runs with the gold queries");
  grade->add_option("--store", store_path)->capture_default_str();
  grade->add_option("--db", db_path)->required()->check(CLI::ExistingFile);
  grade->add_option("--tolerance", tolerance)->capture_default_str();
  auto* report = ev->add_subcommand("report", "Summarize graded runs");
  report->add_option("--store", store_path)->capture_default_str();
  report->add_option("--format", format)->check(CLI::IsMember({"json", "text"}))->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  if (verbose) log::set_level(log::Level::debug);

  try {
    if (*ing) return ingest(feeds, tags, municipalities, db_path);
    if (*render) return catalog_render(db_path, annotations, date);
    if (*idx) return build_index(db_path, config_path, exemplars_path, out);
    if (*srv) return serve(db_path, config_path, host, port);
    if (*ak) return ask(db_path, config_path, question);
    if (*expand) return eval_expand(store_path, db_path, config_path, seed, date);
    if (*run) return eval_run(store_path, endpoint, repeats, parallel);
    if (*grade) return eval_grade(store_path, db_path, tolerance);
    if (*report) return eval_report(store_path, format);
  } catch (const Error& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
