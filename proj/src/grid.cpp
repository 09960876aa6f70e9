#include "sdopf/grid.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace sdopf {

using nlohmann::json;

Eigen::MatrixXcd build_admittance(const std::vector<Branch>& branches, int n_bus) {
  Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n_bus, n_bus);
  for (const auto& br : branches) {
    if (br.from < 0 || br.from >= n_bus || br.to < 0 || br.to >= n_bus)
      throw CaseError("branch references bus index out of range: " + std::to_string(br.from + 1) +
                      "-" + std::to_string(br.to + 1));
    y(br.from, br.to) -= br.y_series;
    y(br.to, br.from) -= br.y_series;
    y(br.from, br.from) += br.y_series + br.y_shunt_from;
    y(br.to, br.to) += br.y_series + br.y_shunt_to;
  }
  return y;
}

Eigen::VectorXd expand_to_nodes(const MappingMatrices& maps, const Eigen::VectorXd& g,
                                DeviceKind which) {
  const Eigen::MatrixXd& m = (which == DeviceKind::Gen) ? maps.m_g : maps.m_b;
  if (g.size() != m.cols())
    throw std::invalid_argument("expand_to_nodes: vector length " + std::to_string(g.size()) +
                                " does not match device count " + std::to_string(m.cols()));
  return m * g;
}

namespace {

void require_keys(const json& j, const std::set<std::string>& allowed, const std::string& where,
                  const std::string& origin) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw CaseError(origin + ": unknown key '" + it.key() + "' in " + where);
  }
}

double num(const json& j, const char* key, const std::string& origin) {
  if (!j.contains(key)) throw CaseError(origin + ": missing key '" + std::string(key) + "'");
  if (!j[key].is_number()) throw CaseError(origin + ": key '" + std::string(key) + "' must be a number");
  return j[key].get<double>();
}

MappingMatrices build_maps(int n_bus, const std::vector<int>& gen_buses,
                           const std::vector<int>& bess_buses) {
  MappingMatrices maps;
  maps.m_g = Eigen::MatrixXd::Zero(n_bus, static_cast<int>(gen_buses.size()));
  maps.m_b = Eigen::MatrixXd::Zero(n_bus, static_cast<int>(bess_buses.size()));
  for (size_t g = 0; g < gen_buses.size(); ++g) maps.m_g(gen_buses[g], static_cast<int>(g)) = 1.0;
  for (size_t b = 0; b < bess_buses.size(); ++b) maps.m_b(bess_buses[b], static_cast<int>(b)) = 1.0;
  return maps;
}

void validate(const GridCase& gc, const std::string& origin) {
  if (gc.n_bus <= 0) throw CaseError(origin + ": case has no buses");
  if (gc.n_gen <= 0) throw CaseError(origin + ": case has no generators");
  for (int i = 0; i < gc.n_gen; ++i) {
    if (gc.gen_p_min(i) > gc.gen_p_max(i) || gc.gen_q_min(i) > gc.gen_q_max(i))
      throw CaseError(origin + ": generator " + std::to_string(i + 1) + " has inverted bounds");
    if (gc.cost_a(i) < 0 || gc.cost_b(i) < 0 || gc.cost_c(i) < 0)
      throw CaseError(origin + ": generator " + std::to_string(i + 1) + " has negative cost coefficient");
  }
  for (int i = 0; i < gc.n_bus; ++i) {
    if (gc.v_min(i) <= 0) throw CaseError(origin + ": v_min must be positive at bus " + std::to_string(i + 1));
    if (gc.v_min(i) > gc.v_max(i))
      throw CaseError(origin + ": voltage bounds inverted at bus " + std::to_string(i + 1));
  }
  bool slack_has_gen = std::find(gc.gen_buses.begin(), gc.gen_buses.end(), gc.slack_bus) !=
                       gc.gen_buses.end();
  if (!slack_has_gen) throw CaseError(origin + ": slack bus has no generator");
  const auto& bp = gc.bess;
  if (bp.eta_ch <= 0 || bp.eta_ch > 1 || bp.eta_dis <= 0 || bp.eta_dis > 1)
    throw CaseError(origin + ": BESS efficiencies must lie in (0, 1]");
  for (int b = 0; b < gc.n_bess; ++b) {
    if (bp.soc_min(b) < 0 || bp.soc_min(b) >= bp.soc_max(b) || bp.soc_max(b) > 1)
      throw CaseError(origin + ": BESS " + std::to_string(b + 1) + " SOC bounds invalid");
    if (bp.p_ch_rated(b) < 0 || bp.p_dis_rated(b) < 0)
      throw CaseError(origin + ": BESS " + std::to_string(b + 1) + " rated power negative");
  }
  if (bp.dt_over_ecap <= 0) throw CaseError(origin + ": dt_over_ecap must be positive");
}

}  // namespace

GridCase parse_case(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CaseError(origin + ": parse error: " + e.what());
  }
  require_keys(j, {"name", "base_mva", "buses", "branches", "generators", "bess", "dt_over_ecap"},
               "case", origin);
  GridCase gc;
  gc.name = j.value("name", origin);
  gc.base_mva = j.value("base_mva", 100.0);
  if (!j.contains("buses") || !j["buses"].is_array()) throw CaseError(origin + ": missing 'buses' list");
  gc.n_bus = static_cast<int>(j["buses"].size());

  gc.v_min.resize(gc.n_bus);
  gc.v_max.resize(gc.n_bus);
  gc.d_p_base = Eigen::VectorXd::Zero(gc.n_bus);
  gc.d_q_base = Eigen::VectorXd::Zero(gc.n_bus);
  std::set<int> seen_ids;
  for (int i = 0; i < gc.n_bus; ++i) {
    const json& b = j["buses"][i];
    require_keys(b, {"id", "v_min", "v_max", "d_p", "d_q"}, "bus entry", origin);
    int id = static_cast<int>(num(b, "id", origin));
    if (id != i + 1)
      throw CaseError(origin + ": bus ids must be contiguous 1..N; found " + std::to_string(id) +
                      " at position " + std::to_string(i + 1));
    seen_ids.insert(id);
    gc.v_min(i) = num(b, "v_min", origin);
    gc.v_max(i) = num(b, "v_max", origin);
    gc.d_p_base(i) = num(b, "d_p", origin);
    gc.d_q_base(i) = num(b, "d_q", origin);
  }

  if (!j.contains("branches") || !j["branches"].is_array())
    throw CaseError(origin + ": missing 'branches' list");
  for (const json& e : j["branches"]) {
    require_keys(e, {"from", "to", "r", "x", "b_shunt"}, "branch entry", origin);
    Branch br;
    br.from = static_cast<int>(num(e, "from", origin)) - 1;
    br.to = static_cast<int>(num(e, "to", origin)) - 1;
    if (br.from < 0 || br.from >= gc.n_bus || br.to < 0 || br.to >= gc.n_bus)
      throw CaseError(origin + ": branch references unknown bus " +
                      std::to_string(std::max(br.from, br.to) + 1));
    double r = num(e, "r", origin), x = num(e, "x", origin);
    if (r == 0.0 && x == 0.0) throw CaseError(origin + ": branch with zero impedance");
    br.y_series = 1.0 / cplx(r, x);
    double b_sh = num(e, "b_shunt", origin);
    br.y_shunt_from = cplx(0.0, b_sh / 2.0);
    br.y_shunt_to = cplx(0.0, b_sh / 2.0);
    gc.branches.push_back(br);
  }

  if (!j.contains("generators") || !j["generators"].is_array())
    throw CaseError(origin + ": missing 'generators' list");
  gc.n_gen = static_cast<int>(j["generators"].size());
  gc.gen_p_min.resize(gc.n_gen);
  gc.gen_p_max.resize(gc.n_gen);
  gc.gen_q_min.resize(gc.n_gen);
  gc.gen_q_max.resize(gc.n_gen);
  gc.cost_a.resize(gc.n_gen);
  gc.cost_b.resize(gc.n_gen);
  gc.cost_c.resize(gc.n_gen);
  int n_slack = 0;
  for (int g = 0; g < gc.n_gen; ++g) {
    const json& e = j["generators"][g];
    require_keys(e, {"bus", "p_min", "p_max", "q_min", "q_max", "cost_a", "cost_b", "cost_c", "is_slack"},
                 "generator entry", origin);
    int bus = static_cast<int>(num(e, "bus", origin)) - 1;
    if (bus < 0 || bus >= gc.n_bus)
      throw CaseError(origin + ": generator references unknown bus " + std::to_string(bus + 1));
    gc.gen_buses.push_back(bus);
    gc.gen_p_min(g) = num(e, "p_min", origin);
    gc.gen_p_max(g) = num(e, "p_max", origin);
    gc.gen_q_min(g) = num(e, "q_min", origin);
    gc.gen_q_max(g) = num(e, "q_max", origin);
    gc.cost_a(g) = num(e, "cost_a", origin);
    gc.cost_b(g) = num(e, "cost_b", origin);
    gc.cost_c(g) = num(e, "cost_c", origin);
    if (e.value("is_slack", false)) {
      gc.slack_bus = bus;
      gc.slack_gen = g;
      ++n_slack;
    }
  }
  if (n_slack != 1) throw CaseError(origin + ": exactly one generator must be marked is_slack");

  if (!j.contains("bess") || !j["bess"].is_array()) throw CaseError(origin + ": missing 'bess' list");
  gc.n_bess = static_cast<int>(j["bess"].size());
  auto& bp = gc.bess;
  bp.p_ch_rated.resize(gc.n_bess);
  bp.p_dis_rated.resize(gc.n_bess);
  bp.soc_min.resize(gc.n_bess);
  bp.soc_max.resize(gc.n_bess);
  for (int b = 0; b < gc.n_bess; ++b) {
    const json& e = j["bess"][b];
    require_keys(e, {"bus", "p_ch_rated", "p_dis_rated", "eta_ch", "eta_dis", "soc_min", "soc_max"},
                 "bess entry", origin);
    int bus = static_cast<int>(num(e, "bus", origin)) - 1;
    if (bus < 0 || bus >= gc.n_bus)
      throw CaseError(origin + ": bess references unknown bus " + std::to_string(bus + 1));
    gc.bess_buses.push_back(bus);
    bp.p_ch_rated(b) = num(e, "p_ch_rated", origin);
    bp.p_dis_rated(b) = num(e, "p_dis_rated", origin);
    bp.soc_min(b) = num(e, "soc_min", origin);
    bp.soc_max(b) = num(e, "soc_max", origin);
    double ech = num(e, "eta_ch", origin), edis = num(e, "eta_dis", origin);
    if (b == 0) {
      bp.eta_ch = ech;
      bp.eta_dis = edis;
    } else if (ech != bp.eta_ch || edis != bp.eta_dis) {
      throw CaseError(origin + ": BESS efficiencies must be uniform across devices");
    }
  }
  bp.dt_over_ecap = num(j, "dt_over_ecap", origin);

  gc.Y = build_admittance(gc.branches, gc.n_bus);
  gc.maps = build_maps(gc.n_bus, gc.gen_buses, gc.bess_buses);
  validate(gc, origin);
  return gc;
}

GridCase load_case(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CaseError("cannot open case file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_case(ss.str(), path);
}

}  // namespace sdopf
