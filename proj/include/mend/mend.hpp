#pragma once

#include "mend/errors.hpp"
#include "mend/numkit.hpp"
#include "mend/basenet.hpp"
#include "mend/mendcore.hpp"
#include "mend/metatrain.hpp"
#include "mend/editbench.hpp"
#include "mend/evalkit.hpp"
#include "mend/experiment.hpp"
