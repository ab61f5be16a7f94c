#pragma once

#include "villa/adversary.hpp"
#include "villa/array.hpp"
#include "villa/autodiff.hpp"
#include "villa/checkpoint.hpp"
#include "villa/dataset_io.hpp"
#include "villa/grad_check.hpp"
#include "villa/harness.hpp"
#include "villa/metrics.hpp"
#include "villa/model.hpp"
#include "villa/objectives.hpp"
#include "villa/optimizer.hpp"
#include "villa/probe.hpp"
#include "villa/synth.hpp"
#include "villa/trainer.hpp"
