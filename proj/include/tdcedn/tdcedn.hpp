#pragma once

// Convenience include for the whole library.

#include "tdcedn/checkpoint.hpp"
#include "tdcedn/data.hpp"
#include "tdcedn/eval.hpp"
#include "tdcedn/gradcheck.hpp"
#include "tdcedn/inference.hpp"
#include "tdcedn/layers.hpp"
#include "tdcedn/loss.hpp"
#include "tdcedn/network.hpp"
#include "tdcedn/pnm.hpp"
#include "tdcedn/rng.hpp"
#include "tdcedn/synthetic.hpp"
#include "tdcedn/tensor.hpp"
#include "tdcedn/trainer.hpp"
