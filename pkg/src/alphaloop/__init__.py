# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

__title__ = "alphaloop"
__summary__ = "Closed-loop factor mining, screening and trading research engine"

__version__ = "0.4.0.dev0"

__author__ = "The alphaloop developers"

__license__ = "BSD-2-Clause or Apache-2.0"
__copyright__ = f"2025 {__author__}"
