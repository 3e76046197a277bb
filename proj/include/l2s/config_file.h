// `key = value` configuration text shared by model, trainer and CLI configs.
// Blank lines and lines starting with '#' are ignored. Lists are comma
// separated, e.g. `anneal_steps = 3000, 4000, 5000`.

#ifndef L2S_CONFIG_FILE_H_
#define L2S_CONFIG_FILE_H_

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace l2s {

using KeyValues = std::map<std::string, std::string>;

KeyValues ParseKeyValues(const std::string& text);
KeyValues ReadKeyValueFile(const std::filesystem::path& path);

int ParseInt(const std::string& key, const std::string& value);
long long ParseInt64(const std::string& key, const std::string& value);
double ParseDouble(const std::string& key, const std::string& value);
bool ParseBool(const std::string& key, const std::string& value);
std::vector<int> ParseIntList(const std::string& key, const std::string& value);

std::string FormatDouble(double v);  // shortest round-trip form
std::string FormatIntList(const std::vector<int>& v);

}  // namespace l2s

#endif  // L2S_CONFIG_FILE_H_
