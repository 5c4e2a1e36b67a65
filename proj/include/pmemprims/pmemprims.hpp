#pragma once

#include <pmemprims/bytes.hpp>
#include <pmemprims/crash_checker.hpp>
#include <pmemprims/device.hpp>
#include <pmemprims/hex_image.hpp>
#include <pmemprims/page_flush.hpp>
#include <pmemprims/wal.hpp>
