#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace bldm {

// Invalid configuration; carries one diagnostic per offending field.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<std::string> problems)
        : std::runtime_error(join(problems)), problems_(std::move(problems)) {}
    const std::vector<std::string>& problems() const { return problems_; }

private:
    static std::string join(const std::vector<std::string>& p) {
        std::string s = "invalid configuration:";
        for (const auto& x : p) s += "\n  " + x;
        return s;
    }
    std::vector<std::string> problems_;
};

// An upstream artifact is absent; names the subcommand that produces it.
class MissingArtifact : public std::runtime_error {
public:
    MissingArtifact(std::string prerequisite, const std::string& what)
        : std::runtime_error(what + " (run `" + prerequisite + "` first)"), prerequisite_(std::move(prerequisite)) {}
    const std::string& prerequisite() const { return prerequisite_; }

private:
    std::string prerequisite_;
};

// Training or sampling produced a non-finite value.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace bldm
