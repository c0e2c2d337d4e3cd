#include "treeformer/rng.hpp"
