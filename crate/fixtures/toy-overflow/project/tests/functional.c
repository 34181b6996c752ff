#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "decode.h"

static int failures;

static void check(const char *name, int ok)
{
    printf("%s: %s\n", ok ? "PASS" : "FAIL", name);
    if (!ok)
        failures++;
}

static void test_decode_simple(void)
{
    const unsigned char rec[] = {3, 'a', 'b', 'c'};
    char *s = decode_record(rec, sizeof rec);
    check("test_decode_simple", s != NULL && strcmp(s, "abc") == 0);
    free(s);
}

static void test_decode_empty_payload(void)
{
    const unsigned char rec[] = {0};
    char *s = decode_record(rec, sizeof rec);
    check("test_decode_empty_payload", s != NULL && s[0] == '\0');
    free(s);
}

static void test_decode_trailing_bytes(void)
{
    const unsigned char rec[] = {2, 'h', 'i', 'x', 'y'};
    char *s = decode_record(rec, sizeof rec);
    check("test_decode_trailing_bytes", s != NULL && strcmp(s, "hi") == 0);
    free(s);
}

static void test_decode_null(void)
{
    check("test_decode_null", decode_record(NULL, 0) == NULL);
}

int main(void)
{
    test_decode_simple();
    test_decode_empty_payload();
    test_decode_trailing_bytes();
    test_decode_null();
    return failures == 0 ? 0 : 1;
}
