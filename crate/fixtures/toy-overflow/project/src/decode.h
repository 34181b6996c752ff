#ifndef DECODE_H
#define DECODE_H

#include <stddef.h>

char *decode_record(const unsigned char *data, size_t size);

#endif
