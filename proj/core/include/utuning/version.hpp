#pragma once

#define UTUNING_VERSION "0.1.0"
