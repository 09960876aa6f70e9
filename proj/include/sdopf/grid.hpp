#pragma once

#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sdopf {

using cplx = std::complex<double>;

/// Thrown on malformed or inconsistent case files.
struct CaseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Branch {
  int from = 0;  // 0-based bus index
  int to = 0;
  cplx y_series{0.0, 0.0};
  cplx y_shunt_from{0.0, 0.0};  // shunt admittance connected at each end
  cplx y_shunt_to{0.0, 0.0};
};

struct BessParams {
  double e_cap = 1000.0;
  double dt = 18.0;
  // Ratio used by the SOC recursion; authoritative over dt/e_cap.
  double dt_over_ecap = 0.005;
  double eta_ch = 0.98;
  double eta_dis = 0.98;
  Eigen::VectorXd p_ch_rated;   // length B, p.u.
  Eigen::VectorXd p_dis_rated;  // length B, p.u.
  Eigen::VectorXd soc_min;      // length B
  Eigen::VectorXd soc_max;      // length B
};

/// Bus-placement matrices: m_g maps generator-space vectors to nodal
/// vectors, m_b does the same for storage devices. Columns are one-hot.
struct MappingMatrices {
  Eigen::MatrixXd m_g;  // N x G
  Eigen::MatrixXd m_b;  // N x B
};

enum class DeviceKind { Gen, Bess };

/// Immutable static description of the network under study. Built once by
/// load_case and shared read-only afterwards.
struct GridCase {
  int n_bus = 0;
  int n_gen = 0;
  int n_bess = 0;
  int slack_bus = 0;  // 0-based bus index
  int slack_gen = 0;  // index into the generator arrays
  std::vector<int> gen_buses;
  std::vector<int> bess_buses;
  std::vector<Branch> branches;
  Eigen::MatrixXcd Y;  // N x N nodal admittance, complex symmetric

  Eigen::VectorXd gen_p_min, gen_p_max;  // length G, p.u.
  Eigen::VectorXd gen_q_min, gen_q_max;
  Eigen::VectorXd v_min, v_max;  // length N, p.u.
  // Fuel cost per step: a*g^2 + b*g + c with g in p.u.
  Eigen::VectorXd cost_a, cost_b, cost_c;
  Eigen::VectorXd d_p_base, d_q_base;  // base nodal demands, p.u.

  BessParams bess;
  MappingMatrices maps;
  double base_mva = 100.0;
  std::string name;

  bool is_slack_gen(int g) const { return g == slack_gen; }
};

/// Builds the nodal admittance matrix from a branch list. Off-diagonals
/// carry the negated series admittance sums, diagonals collect incident
/// series plus shunt admittances.
Eigen::MatrixXcd build_admittance(const std::vector<Branch>& branches, int n_bus);

/// Places a device-space vector (length G or B) onto the buses; entries for
/// buses without a device of the given kind are zero.
Eigen::VectorXd expand_to_nodes(const MappingMatrices& maps, const Eigen::VectorXd& g,
                                DeviceKind which);

/// Loads and validates a case file (JSON schema, 1-indexed bus ids in the
/// file, converted to 0-based indices here). Throws CaseError on parse or
/// validation failure.
GridCase load_case(const std::string& path);

/// Parses a case from an in-memory JSON string; `origin` names the source
/// in error messages.
GridCase parse_case(const std::string& text, const std::string& origin);

}  // namespace sdopf
