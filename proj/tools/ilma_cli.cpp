// tools/ilma_cli.cpp
//
// Copyright (c)  2026  ilmalab authors

int main() { return 0; }
