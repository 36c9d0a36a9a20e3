#pragma once

#include "datwep/errors.hpp"
#include "datwep/tensor.hpp"
#include "datwep/tape.hpp"
#include "datwep/rng.hpp"
#include "datwep/ops.hpp"
#include "datwep/text.hpp"
#include "datwep/question_type.hpp"
#include "datwep/losses.hpp"
#include "datwep/curriculum.hpp"
#include "datwep/model.hpp"
#include "datwep/gradcheck.hpp"
#include "datwep/image_io.hpp"
#include "datwep/data.hpp"
#include "datwep/optim.hpp"
#include "datwep/checkpoint.hpp"
#include "datwep/svg_plot.hpp"
#include "datwep/trainer.hpp"
