#pragma once

#include "commreg/core.hpp"
#include "commreg/eval.hpp"
#include "commreg/field.hpp"
#include "commreg/image_io.hpp"
#include "commreg/losses.hpp"
#include "commreg/models.hpp"
#include "commreg/synthdata.hpp"
#include "commreg/train.hpp"
