// SPDX-License-Identifier: Apache-2.0
// Placeholder; replaced by the full acceptance suite.
int main() { return 0; }
