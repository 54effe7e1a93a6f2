#pragma once

#include "esi/support.hpp"
#include "esi/scale.hpp"
#include "esi/measure.hpp"
#include "esi/verify.hpp"
#include "esi/characterization.hpp"
#include "esi/algebra.hpp"
#include "esi/conditions.hpp"
#include "esi/pacbayes.hpp"
#include "esi/random_eta.hpp"
#include "esi/sequential.hpp"
