#include <gtest/gtest.h>

#include "icc/text.hpp"

using namespace icc::text;

TEST(Text, DecodesMultibyteScalars) {
    EXPECT_EQ(decode_utf8("abc"), U"abc");
    EXPECT_EQ(decode_utf8("caf\xC3\xA9"), U"café");
    EXPECT_EQ(decode_utf8("\xF0\x9F\x90\xB6"), U"\U0001F436");
    EXPECT_EQ(count_scalars("日本語"), 3u);
}

TEST(Text, InvalidBytesBecomeReplacementChars) {
    EXPECT_EQ(decode_utf8("a\xFF" "b"), U"a�b");
    // Overlong encoding of '/'.
    EXPECT_EQ(decode_utf8("\xC0\xAF"), U"��");
    // Truncated sequence at end.
    EXPECT_EQ(decode_utf8("\xE6\x97"), U"��");
}

TEST(Text, WordsAndTrim) {
    EXPECT_EQ(count_words("  a small   dog \t"), 3u);
    EXPECT_EQ(count_words(""), 0u);
    EXPECT_EQ(trim("  x y \n"), "x y");
    EXPECT_TRUE(trim(" \t ").empty());
}
