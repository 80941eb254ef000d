# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0


class NormLabError(ValueError):
    """Raised for any invalid input, shape, file, or numeric failure.

    The CLI turns these into an error message and exit status 1.
    """
