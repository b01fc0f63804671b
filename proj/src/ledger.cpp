#include "fcl/ledger.hpp"

#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace fcl {

std::string_view to_string(Direction d) { return d == Direction::kUp ? "up" : "down"; }

std::string_view to_string(Component c) {
  switch (c) {
    case Component::kOnlineNet: return "online_net";
    case Component::kPredictor: return "predictor";
    case Component::kTargetNet: return "target_net";
    case Component::kFeatures: return "features";
    case Component::kScalar: return "scalar";
  }
  return "?";
}

Direction parse_direction(std::string_view s) {
  if (s == "up") return Direction::kUp;
  if (s == "down") return Direction::kDown;
  throw std::invalid_argument("unknown direction '" + std::string(s) + "'");
}

Component parse_component(std::string_view s) {
  for (Component c : kAllComponents) {
    if (to_string(c) == s) return c;
  }
  throw std::invalid_argument("unknown component '" + std::string(s) + "'");
}

void CommLedger::record(int round, int client, Direction direction, Component component, std::uint64_t bytes) {
  entries_.push_back(LedgerEntry{round, client, direction, component, bytes});
}

std::uint64_t CommLedger::total() const {
  std::uint64_t sum = 0;
  for (const auto& e : entries_) sum += e.bytes;
  return sum;
}

std::uint64_t CommLedger::total(Component component) const {
  std::uint64_t sum = 0;
  for (const auto& e : entries_) {
    if (e.component == component) sum += e.bytes;
  }
  return sum;
}

std::uint64_t CommLedger::total(Direction direction, Component component) const {
  std::uint64_t sum = 0;
  for (const auto& e : entries_) {
    if (e.direction == direction && e.component == component) sum += e.bytes;
  }
  return sum;
}

std::uint64_t CommLedger::round_total(int round) const {
  std::uint64_t sum = 0;
  for (const auto& e : entries_) {
    if (e.round == round) sum += e.bytes;
  }
  return sum;
}

std::uint64_t CommLedger::round_total(int round, Direction direction, Component component) const {
  std::uint64_t sum = 0;
  for (const auto& e : entries_) {
    if (e.round == round && e.direction == direction && e.component == component) sum += e.bytes;
  }
  return sum;
}

void CommLedger::write_csv(std::ostream& out) const {
  out << "round,client,direction,component,bytes\n";
  for (const auto& e : entries_) {
    out << e.round << ',' << e.client << ',' << to_string(e.direction) << ',' << to_string(e.component) << ','
        << e.bytes << '\n';
  }
}

CommLedger CommLedger::read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "round,client,direction,component,bytes") {
    throw std::runtime_error("ledger csv: missing or unexpected header");
  }
  CommLedger ledger;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string round, client, direction, component, bytes;
    if (!std::getline(row, round, ',') || !std::getline(row, client, ',') || !std::getline(row, direction, ',') ||
        !std::getline(row, component, ',') || !std::getline(row, bytes)) {
      throw std::runtime_error("ledger csv: malformed line " + std::to_string(line_no));
    }
    try {
      ledger.record(std::stoi(round), std::stoi(client), parse_direction(direction), parse_component(component),
                    std::stoull(bytes));
    } catch (const std::exception& e) {
      throw std::runtime_error("ledger csv: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ledger;
}

}  // namespace fcl
