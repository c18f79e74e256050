#pragma once

// Template loading and rendering.
//
// Templates are data files (YAML: `template` + optional
// `message_alternatives`), never code. The body carries `{{ var }}`
// placeholders plus one loop construct for the proposal template's
// example blocks:
//
//   {{#backward_infos.successes}} ... {{/backward_infos.successes}}
//   {{#backward_infos.errors}}    ... {{/backward_infos.errors}}
//
// Section tags standing alone on a line consume that whole line. The
// enclosed block is rendered once per matching example, where matching
// means the normalized model output does (successes) or does not
// (errors) equal the normalized target. Inside a block,
// {{ backward_info.input }}, {{ backward_info.output }} and
// {{ backward_info.target }} refer to the current example.
//
// Rendering is a pure function: substitution is literal, substituted
// values are never re-scanned, and the only nondeterminism (picking a
// message alternative) comes from an explicit selector.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "dln/rng.hpp"
#include "dln/text.hpp"

namespace dln {

struct BackwardInfo {
  std::string input;
  std::string output;  // model prediction; empty is fine for successes
  std::string target;
};

struct Binding {
  std::map<std::string, std::string> vars;
  std::vector<BackwardInfo> backward_infos;
};

struct RenderResult {
  std::string text;
  int message_index = -1;  // -1 when the template has no {{ message }}
};

class TemplateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Template {
 public:
  static Template load(const std::string& source, std::string name = "") {
    YAML::Node doc;
    try {
      doc = YAML::Load(source);
    } catch (const YAML::Exception& e) {
      throw TemplateError("template '" + name + "': bad document: " + e.what());
    }
    if (!doc.IsMap() || !doc["template"])
      throw TemplateError("template '" + name + "': missing 'template' key");
    Template t;
    t.name_ = std::move(name);
    t.body_ = doc["template"].as<std::string>();
    if (doc["message_alternatives"]) {
      for (const auto& item : doc["message_alternatives"])
        t.message_alternatives_.push_back(item.as<std::string>());
    }
    t.analyze();
    return t;
  }

  static Template load_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TemplateError("cannot open template file: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return load(buf.str(), path.stem().string());
  }

  const std::string& name() const noexcept { return name_; }
  const std::string& body() const noexcept { return body_; }
  const std::vector<std::string>& message_alternatives() const noexcept {
    return message_alternatives_;
  }
  const std::set<std::string>& required_vars() const noexcept {
    return required_vars_;
  }
  bool uses_message() const noexcept {
    return required_vars_.count("message") > 0;
  }
  bool has_sections() const noexcept { return has_sections_; }

  /// For templates without {{ message }}.
  RenderResult render(const Binding& binding) const {
    if (uses_message())
      throw TemplateError("template '" + name_ + "': message selector required");
    return render_impl(binding, -1);
  }

  /// Fixed message choice; reproducible by construction.
  RenderResult render(const Binding& binding, std::size_t message_index) const {
    if (uses_message() && message_index >= message_alternatives_.size())
      throw std::out_of_range("template '" + name_ + "': message index " +
                              std::to_string(message_index) + " out of range");
    return render_impl(binding, static_cast<int>(message_index));
  }

  /// Draws the message from the stream. Consumes nothing if the template
  /// has no {{ message }}.
  RenderResult render(const Binding& binding, rng::Stream& stream) const {
    int idx = -1;
    if (uses_message())
      idx = static_cast<int>(stream.next_below(message_alternatives_.size()));
    return render_impl(binding, idx);
  }

  /// Emits a document that load() accepts and that renders identically.
  std::string serialize() const {
    std::string out = "template: " + emit_scalar(body_, 2) + "\n";
    if (!message_alternatives_.empty()) {
      out += "message_alternatives:\n";
      for (const auto& alt : message_alternatives_)
        out += "  - " + emit_quoted(alt) + "\n";
    }
    return out;
  }

 private:
  // ---- load-time analysis ------------------------------------------------

  static bool valid_name(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s) {
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.')
        return false;
    }
    return s.front() != '.' && s.back() != '.';
  }

  struct Tag {
    std::size_t begin, end;  // byte range in body, inclusive of braces
    std::string name;        // trimmed inner text without #//
    enum { var, open, close } kind;
  };

  std::vector<Tag> scan() const {
    std::vector<Tag> tags;
    std::size_t pos = 0;
    while ((pos = body_.find("{{", pos)) != std::string::npos) {
      std::size_t close = body_.find("}}", pos + 2);
      if (close == std::string::npos)
        throw TemplateError("template '" + name_ + "': unclosed '{{'");
      Tag t;
      t.begin = pos;
      t.end = close + 2;
      std::string inner = text::trim(body_.substr(pos + 2, close - pos - 2));
      if (!inner.empty() && inner.front() == '#') {
        t.kind = Tag::open;
        inner = text::trim(inner.substr(1));
      } else if (!inner.empty() && inner.front() == '/') {
        t.kind = Tag::close;
        inner = text::trim(inner.substr(1));
      } else {
        t.kind = Tag::var;
      }
      if (!valid_name(inner))
        throw TemplateError("template '" + name_ + "': bad placeholder '" +
                            body_.substr(pos, close + 2 - pos) + "'");
      t.name = std::move(inner);
      tags.push_back(std::move(t));
      pos = close + 2;
    }
    return tags;
  }

  void analyze() {
    if (body_.empty())
      throw TemplateError("template '" + name_ + "': empty body");
    bool in_section = false;
    std::string section;
    for (const auto& t : scan()) {
      switch (t.kind) {
        case Tag::open: {
          if (in_section)
            throw TemplateError("template '" + name_ + "': nested section '" +
                                t.name + "'");
          auto dot = t.name.find('.');
          std::string root = t.name.substr(0, dot);
          std::string filter = dot == std::string::npos ? "" : t.name.substr(dot + 1);
          if (root != "backward_infos" || (filter != "successes" && filter != "errors"))
            throw TemplateError("template '" + name_ + "': unknown section '" +
                                t.name + "'");
          in_section = true;
          section = t.name;
          has_sections_ = true;
          required_vars_.insert(root);
          break;
        }
        case Tag::close:
          if (!in_section || t.name != section)
            throw TemplateError("template '" + name_ + "': unbalanced section '" +
                                t.name + "'");
          in_section = false;
          break;
        case Tag::var:
          if (in_section && t.name.rfind("backward_info.", 0) == 0) {
            std::string field = t.name.substr(14);
            if (field != "input" && field != "output" && field != "target")
              throw TemplateError("template '" + name_ +
                                  "': unknown loop field '" + t.name + "'");
          } else {
            required_vars_.insert(t.name);
          }
          break;
      }
    }
    if (in_section)
      throw TemplateError("template '" + name_ + "': unclosed section '" +
                          section + "'");
    if (uses_message() && message_alternatives_.empty())
      throw TemplateError("template '" + name_ +
                          "': {{ message }} used but message_alternatives empty");
  }

  // ---- rendering ---------------------------------------------------------

  /// Widens [begin,end) to cover the whole line when only whitespace
  /// surrounds it there (standalone tag line).
  void standalone_extent(std::size_t& begin, std::size_t& end) const {
    std::size_t ls = body_.rfind('\n', begin == 0 ? 0 : begin - 1);
    ls = (begin == 0) ? 0 : (ls == std::string::npos ? 0 : ls + 1);
    std::size_t le = body_.find('\n', end);
    for (std::size_t i = ls; i < begin; ++i)
      if (body_[i] != ' ' && body_[i] != '\t') return;
    std::size_t stop = le == std::string::npos ? body_.size() : le;
    for (std::size_t i = end; i < stop; ++i)
      if (body_[i] != ' ' && body_[i] != '\t') return;
    begin = ls;
    end = le == std::string::npos ? body_.size() : le + 1;
  }

  std::string lookup(const std::string& name, const Binding& binding,
                     int message_index, const BackwardInfo* local) const {
    if (local && name.rfind("backward_info.", 0) == 0) {
      std::string field = name.substr(14);
      if (field == "input") return local->input;
      if (field == "output") return local->output;
      return local->target;
    }
    if (name == "message" && message_index >= 0)
      return message_alternatives_[static_cast<std::size_t>(message_index)];
    auto it = binding.vars.find(name);
    if (it == binding.vars.end())
      throw std::invalid_argument("render '" + name_ +
                                  "': missing binding for '" + name + "'");
    return it->second;
  }

  std::string substitute(std::string_view piece, const Binding& binding,
                         int message_index, const BackwardInfo* local) const {
    std::string out;
    out.reserve(piece.size());
    std::size_t pos = 0;
    while (pos < piece.size()) {
      std::size_t open = piece.find("{{", pos);
      if (open == std::string_view::npos) {
        out += piece.substr(pos);
        break;
      }
      out += piece.substr(pos, open - pos);
      std::size_t close = piece.find("}}", open + 2);
      if (close == std::string_view::npos) {  // cannot happen post-analyze
        out += piece.substr(open);
        break;
      }
      std::string inner(text::trim(std::string(piece.substr(open + 2, close - open - 2))));
      out += lookup(inner, binding, message_index, local);
      pos = close + 2;
    }
    return out;
  }

  RenderResult render_impl(const Binding& binding, int message_index) const {
    for (const auto& v : required_vars_) {
      if (v == "message" || v == "backward_infos") continue;
      if (!binding.vars.count(v))
        throw std::invalid_argument("render '" + name_ +
                                    "': missing binding for '" + v + "'");
    }
    for (const auto& bi : binding.backward_infos) {
      if (has_sections_ && (bi.input.empty() || bi.target.empty()))
        throw std::invalid_argument("render '" + name_ +
                                    "': backward info needs input and target");
    }

    std::string out;
    std::size_t pos = 0;
    auto tags = scan();
    for (std::size_t i = 0; i < tags.size(); ++i) {
      if (tags[i].kind != Tag::open) continue;
      // find the matching close (analyze() guarantees it exists, unnested)
      std::size_t j = i + 1;
      while (tags[j].kind != Tag::close) ++j;

      std::size_t ob = tags[i].begin, oe = tags[i].end;
      standalone_extent(ob, oe);
      std::size_t cb = tags[j].begin, ce = tags[j].end;
      standalone_extent(cb, ce);

      out += substitute(std::string_view(body_).substr(pos, ob - pos), binding,
                        message_index, nullptr);
      bool want_success = tags[i].name.ends_with("successes");
      std::string_view block = std::string_view(body_).substr(oe, cb - oe);
      for (const auto& bi : binding.backward_infos) {
        bool success = text::normalize_answer(bi.output) ==
                       text::normalize_answer(bi.target);
        if (success == want_success)
          out += substitute(block, binding, message_index, &bi);
      }
      pos = ce;
      i = j;
    }
    out += substitute(std::string_view(body_).substr(pos), binding,
                      message_index, nullptr);
    return RenderResult{std::move(out), message_index};
  }

  // ---- serialization -----------------------------------------------------

  static bool block_safe(const std::string& s) {
    if (s.empty() || s.front() == ' ' || s.front() == '\t' || s.front() == '\n')
      return false;
    std::size_t line_start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
      if (i == s.size() || s[i] == '\n') {
        if (i > line_start && (s[i - 1] == ' ' || s[i - 1] == '\t')) return false;
        line_start = i + 1;
      } else if (s[i] == '\r') {
        return false;
      }
    }
    return s.back() != '\n';
  }

  static std::string emit_quoted(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
      switch (c) {
        case '\\': out += "\\\\"; break;
        case '"': out += "\\\""; break;
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        case '\r': out += "\\r"; break;
        default: out += c;
      }
    }
    out += '"';
    return out;
  }

  static std::string emit_scalar(const std::string& s, int indent) {
    if (!block_safe(s)) return emit_quoted(s);
    std::string pad(static_cast<std::size_t>(indent), ' ');
    std::string out = "|-";
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
      if (i == s.size() || s[i] == '\n') {
        out += '\n';
        if (i > start) out += pad + s.substr(start, i - start);
        start = i + 1;
      }
    }
    return out;
  }

  std::string name_;
  std::string body_;
  std::vector<std::string> message_alternatives_;
  std::set<std::string> required_vars_;
  bool has_sections_ = false;
};

}  // namespace dln
