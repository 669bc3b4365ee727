#pragma once

#include <locale>
#include <sstream>
#include <string>
#include <string_view>

namespace iresnet {

/// CSV assembly with '.' decimals and round-trip precision regardless of the
/// global locale.
class CsvWriter {
 public:
  explicit CsvWriter(std::string_view header) {
    out_.imbue(std::locale::classic());
    out_.precision(17);
    out_ << header << '\n';
  }

  template <typename... Fields>
  void row(const Fields&... fields) {
    bool first = true;
    ((out_ << (first ? "" : ",") << fields, first = false), ...);
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

}  // namespace iresnet
