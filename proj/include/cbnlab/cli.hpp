#pragma once
#include <ostream>
#include <string>
#include <vector>
namespace cbnlab {
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
}
