#pragma once

#include "invgame/numerics.hpp"
#include "invgame/model.hpp"
#include "invgame/stabilize.hpp"
#include "invgame/inverse_mb.hpp"
#include "invgame/trajectory.hpp"
#include "invgame/inverse_mf.hpp"
#include "invgame/distributed.hpp"
