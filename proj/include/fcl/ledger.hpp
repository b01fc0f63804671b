#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace fcl {

enum class Direction { kUp, kDown };
enum class Component { kOnlineNet, kPredictor, kTargetNet, kFeatures, kScalar };

inline constexpr std::array<Component, 5> kAllComponents = {
    Component::kOnlineNet, Component::kPredictor, Component::kTargetNet, Component::kFeatures, Component::kScalar};

std::string_view to_string(Direction d);
std::string_view to_string(Component c);
Direction parse_direction(std::string_view s);
Component parse_component(std::string_view s);

/// Scalars (distances, alpha) travel as 8-byte doubles.
inline constexpr std::uint64_t kScalarWireBytes = 8;

/// One message between the server and a client. `direction` is from the
/// client's point of view: kUp is client -> server.
struct LedgerEntry {
  int round = 0;
  int client = 0;
  Direction direction = Direction::kUp;
  Component component = Component::kOnlineNet;
  std::uint64_t bytes = 0;
  bool operator==(const LedgerEntry&) const = default;
};

/// Append-only record of every message sent during a federation.
class CommLedger {
 public:
  void record(int round, int client, Direction direction, Component component, std::uint64_t bytes);

  const std::vector<LedgerEntry>& entries() const { return entries_; }

  std::uint64_t total() const;
  std::uint64_t total(Component component) const;
  std::uint64_t total(Direction direction, Component component) const;
  std::uint64_t round_total(int round) const;
  /// Bytes of `component` in `direction` during `round`.
  std::uint64_t round_total(int round, Direction direction, Component component) const;

  /// CSV with header `round,client,direction,component,bytes`.
  void write_csv(std::ostream& out) const;
  static CommLedger read_csv(std::istream& in);

 private:
  std::vector<LedgerEntry> entries_;
};

}  // namespace fcl
