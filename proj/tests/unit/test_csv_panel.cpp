#include "smokecausal/csv.hpp"
#include "smokecausal/errors.hpp"
#include "smokecausal/panel.hpp"
#include "support/tempdir.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>

using namespace smokecausal;
using testsupport::TempDir;
using testsupport::write_text;

namespace {

const char* kSites =
    "site_id,lon,lat,region\n"
    "A,-120.0,37.0,west\n"
    "B,-119.5,37.2,west\n"
    "C,-110.0,40.0,east\n";

std::string panel_rows() {
  return "site_id,day,y,theta_hat,delta_hat\n"
         "A,1,3.0,2.0,0.0\n"
         "A,2,NA,2.5,1.5\n"
         "A,3,4.0,3.0,-0.5\n"
         "B,1,1.0,1.0,2.0\n"
         "B,2,2.0,1.2,0.9\n"
         "B,3,3.0,1.4,1.0\n"
         "C,1,5.0,4.0,5.0\n"
         "C,3,6.0,8.0,0.0\n";
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("csv read trims fields and reports field-count errors by line") {
  TempDir dir;
  write_text(dir / "a.csv", "x, y\n 1 ,2\n\n3,4\n");
  const auto t = csv::read(dir / "a.csv");
  CHECK(t.header == std::vector<std::string>{"x", "y"});
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0].fields[0] == "1");
  CHECK(t.rows[1].line == 4);
  CHECK(t.column("y") == 1);
  CHECK_THROWS_AS(t.column("z"), ValidationError);

  write_text(dir / "b.csv", "x,y\n1,2\n3\n");
  const auto msg = error_of([&] { csv::read(dir / "b.csv"); });
  CHECK(msg.find("b.csv:3") != std::string::npos);
  CHECK_THROWS_AS(csv::read(dir / "missing.csv"), IoError);
}

TEST_CASE("csv number parsing rejects trailing garbage") {
  TempDir dir;
  write_text(dir / "a.csv", "v\n1.5\n2x\n\n");
  const auto t = csv::read(dir / "a.csv");
  CHECK(csv::parse_double(t, t.rows[0], 0) == 1.5);
  const auto msg = error_of([&] { csv::parse_double(t, t.rows[1], 0); });
  CHECK(msg.find("a.csv:3") != std::string::npos);
}

TEST_CASE("writer output reads back") {
  TempDir dir;
  {
    csv::Writer w(dir / "o.csv", {"a", "b"});
    w << "x" << 0.125;
    w.end_row();
  }
  const auto t = csv::read(dir / "o.csv");
  CHECK(csv::parse_double(t, t.rows[0], 1) == 0.125);
}

TEST_CASE("smoke indicator is a strict threshold on the clamped increment") {
  data::MatrixXd d(1, 4);
  d << -3.0, 1.0, 1.0000001, 0.0;
  const auto c1 = data::smoke_indicator(d, 1.0);
  CHECK(int(c1(0, 0)) == 0);
  CHECK(int(c1(0, 1)) == 0);
  CHECK(int(c1(0, 2)) == 1);
  const auto c0 = data::smoke_indicator(d, 0.0);
  CHECK(int(c0(0, 0)) == 0);
  CHECK(int(c0(0, 3)) == 0);
  CHECK(data::count_negative(d) == 1);
}

TEST_CASE("panel loading masks NA and absent rows and interpolates model fields") {
  TempDir dir;
  write_text(dir / "sites.csv", kSites);
  write_text(dir / "panel.csv", panel_rows());
  const auto d = data::load_panel(dir / "sites.csv", dir / "panel.csv", {1.0});
  CHECK(d.n_sites() == 3);
  CHECK(d.n_days() == 3);
  CHECK(d.n_missing() == 2);
  CHECK(int(d.missing(0, 1)) == 1);
  CHECK(int(d.missing(2, 1)) == 1);
  CHECK(d.filled_model_cells == 1);
  CHECK(d.theta_hat(2, 1) == doctest::Approx(6.0));
  CHECK(d.delta_hat(2, 1) == doctest::Approx(2.5));
  CHECK(d.negative_delta_count == 1);
  CHECK(int(d.c(0, 1)) == 1);
  CHECK(int(d.c(1, 2)) == 0);
  CHECK(int(d.c(2, 0)) == 1);
}

TEST_CASE("panel loading reports bad rows with file and line") {
  TempDir dir;
  write_text(dir / "sites.csv", kSites);

  write_text(dir / "p1.csv", panel_rows() + "A,2,1.0,1.0,1.0\n");
  auto msg = error_of([&] { data::load_panel(dir / "sites.csv", dir / "p1.csv", {}); });
  CHECK(msg.find("p1.csv:10") != std::string::npos);
  CHECK(msg.find("duplicate key") != std::string::npos);

  write_text(dir / "p2.csv", panel_rows() + "Z,1,1.0,1.0,1.0\n");
  msg = error_of([&] { data::load_panel(dir / "sites.csv", dir / "p2.csv", {}); });
  CHECK(msg.find("p2.csv:10") != std::string::npos);

  write_text(dir / "p3.csv", panel_rows() + "A,4,abc,1.0,1.0\n");
  msg = error_of([&] { data::load_panel(dir / "sites.csv", dir / "p3.csv", {}); });
  CHECK(msg.find("p3.csv:10") != std::string::npos);

  write_text(dir / "p4.csv", "site_id,day,y,theta_hat\nA,1,1,1\n");
  CHECK_THROWS_AS(data::load_panel(dir / "sites.csv", dir / "p4.csv", {}), ValidationError);

  write_text(dir / "s2.csv", std::string(kSites) + "A,-1,1,west\n");
  msg = error_of([&] { data::load_sites(dir / "s2.csv"); });
  CHECK(msg.find("s2.csv:5") != std::string::npos);
}

TEST_CASE("partition, merge and threshold changes keep rows aligned") {
  TempDir dir;
  write_text(dir / "sites.csv", kSites);
  write_text(dir / "panel.csv", panel_rows());
  const auto d = data::load_panel(dir / "sites.csv", dir / "panel.csv", {1.0});
  const auto blocks = data::partition_regions(d);
  REQUIRE(blocks.size() == 2);
  CHECK(blocks[0].region == "east");
  CHECK(blocks[1].data.n_sites() == 2);
  CHECK(blocks[1].data.y(1, 2) == 3.0);
  CHECK(blocks[1].data.sites.xy(1, 0) == d.sites.xy(1, 0));

  const auto merged = data::merge_regions(d, {"east", "west"}, "east+west");
  CHECK(data::partition_regions(merged).size() == 1);

  const auto d0 = d.with_tau(0.0);
  CHECK(int(d0.c(1, 1)) == 1);
  CHECK(d0.tau == 0.0);
}

TEST_CASE("collinearity screen flags degenerate and short designs") {
  TempDir dir;
  write_text(dir / "sites.csv", kSites);
  std::string p = "site_id,day,y,theta_hat,delta_hat\n";
  for (int t = 1; t <= 20; ++t) {
    const double th = 1.0 + 0.1 * t + 0.05 * (t % 3);
    const double dh = (t % 2) ? 3.0 + 0.2 * t : 0.0;
    p += "A," + std::to_string(t) + ",1.0," + std::to_string(th) + "," + std::to_string(dh) +
         "\n";
    p += "B," + std::to_string(t) + ",1.0," + std::to_string(th) + ",0\n";
    p += "C," + std::to_string(t) + (t <= 3 ? ",1.0," : ",NA,") + std::to_string(th) + ",5\n";
  }
  write_text(dir / "panel.csv", p);
  const auto d = data::load_panel(dir / "sites.csv", dir / "panel.csv", {1.0});
  CHECK(data::collinearity_screen(d, 0).status == data::ScreenStatus::ok);
  CHECK(std::isfinite(data::collinearity_screen(d, 0).condition_number));
  const auto b = data::collinearity_screen(d, 1);
  CHECK(b.status == data::ScreenStatus::degenerate);
  CHECK(b.rank == 2);
  CHECK(data::collinearity_screen(d, 2).status == data::ScreenStatus::insufficient_data);
}
