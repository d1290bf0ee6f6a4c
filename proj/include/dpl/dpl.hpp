#pragma once

#include <dpl/binio.hpp>
#include <dpl/engine.hpp>
#include <dpl/experiment.hpp>
#include <dpl/gradcheck.hpp>
#include <dpl/losses.hpp>
#include <dpl/memory_bank.hpp>
#include <dpl/model.hpp>
#include <dpl/ops.hpp>
#include <dpl/optim.hpp>
#include <dpl/random.hpp>
#include <dpl/style_transfer.hpp>
#include <dpl/synthdata.hpp>
#include <dpl/tape.hpp>
#include <dpl/tensor.hpp>
#include <dpl/verify.hpp>
